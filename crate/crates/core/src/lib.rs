//! Cross-domain fragment diffusion for density-map crowd counting.
//!
//! Source and target image fragments are embedded by an external feature
//! adapter; this crate builds a mutual-kNN affinity graph over the features,
//! ranks source fragments for every target fragment by diffusion, turns the
//! best matches into fused pseudo-labels and drives the iterative loop.

pub mod align;
pub mod binio;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod graph;
pub mod ids;
pub mod metrics;
pub mod patch;
pub mod pipeline;
pub mod pseudolabel;
pub mod raster;
pub mod scenario;
pub mod sparse;

pub use error::{Error, Result};
pub use features::{Domain, FeatureRecord, FeatureSet};
pub use graph::{AffinityGraph, NormalizedGraph, Partition, Role};
pub use ids::FragmentId;
pub use raster::{Raster, RasterKind};
