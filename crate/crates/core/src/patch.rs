//! Sliding-window fragmentation of rasters and re-assembly of patch counts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::FragmentId;
use crate::raster::Raster;

/// Window or stride extent as (rows, cols).
pub type Extent = (usize, usize);

/// Operating point used for training-time fragmentation.
pub const DEFAULT_WINDOW: Extent = (128, 128);
pub const DEFAULT_STRIDE: Extent = (64, 64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadPolicy {
    /// Reject rasters whose extent is not covered exactly by the window grid.
    None,
    /// Replicate the last row/column up to the next stride multiple.
    #[default]
    Edge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchIndex {
    pub id: FragmentId,
    /// Pixel offset of the patch in the (padded) raster.
    pub top: usize,
    pub left: usize,
}

/// Patches of many images, row-major per image and images in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub window: Extent,
    pub stride: Extent,
    pub patches: Vec<(PatchIndex, Raster)>,
    pub image_count: usize,
    pub max_patches_per_image: usize,
}

fn edge_extent(extent: usize, window: usize, stride: usize) -> usize {
    if extent <= window {
        window
    } else {
        window + (extent - window).div_ceil(stride) * stride
    }
}

fn validate_geometry(window: Extent, stride: Extent) -> Result<()> {
    if window.0 == 0 || window.1 == 0 {
        return Err(Error::InvalidWindow);
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::InvalidStride);
    }
    Ok(())
}

/// Grid shape `(rows, cols)` that [`slide_windows`] produces for a raster of `dims`.
pub fn grid_shape(dims: Extent, window: Extent, stride: Extent, pad: PadPolicy) -> Result<Extent> {
    validate_geometry(window, stride)?;
    let (h, w) = match pad {
        PadPolicy::None => {
            if dims.0 < window.0 || dims.1 < window.1 {
                return Err(Error::RasterTooSmall {
                    height: dims.0,
                    width: dims.1,
                    window_h: window.0,
                    window_w: window.1,
                });
            }
            for (extent, window, stride) in [(dims.0, window.0, stride.0), (dims.1, window.1, stride.1)] {
                if (extent - window) % stride != 0 {
                    return Err(Error::RasterNotFitting {
                        extent,
                        window,
                        stride,
                    });
                }
            }
            dims
        }
        PadPolicy::Edge => (
            edge_extent(dims.0, window.0, stride.0),
            edge_extent(dims.1, window.1, stride.1),
        ),
    };
    Ok(((h - window.0) / stride.0 + 1, (w - window.1) / stride.1 + 1))
}

/// Cuts `raster` into `window`-sized patches, left to right and top to bottom.
pub fn slide_windows(
    raster: &Raster,
    image_id: u32,
    window: Extent,
    stride: Extent,
    pad: PadPolicy,
) -> Result<Vec<(PatchIndex, Raster)>> {
    let (rows, cols) = grid_shape(raster.dims(), window, stride, pad)?;
    let padded_h = window.0 + (rows - 1) * stride.0;
    let padded_w = window.1 + (cols - 1) * stride.1;
    let padded;
    let source = if raster.dims() == (padded_h, padded_w) {
        raster
    } else {
        padded = raster.pad_edge(padded_h, padded_w);
        &padded
    };

    let mut out = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let top = row * stride.0;
            let left = col * stride.1;
            let index = PatchIndex {
                id: FragmentId::new(image_id, row as u32, col as u32),
                top,
                left,
            };
            out.push((index, source.crop(top, left, window.0, window.1)?));
        }
    }
    Ok(out)
}

/// Fragments every image; the output order is independent of thread scheduling.
pub fn patchify(
    images: &[(u32, Raster)],
    window: Extent,
    stride: Extent,
    pad: PadPolicy,
) -> Result<PatchSet> {
    let mut order: Vec<&(u32, Raster)> = images.iter().collect();
    order.sort_by_key(|(id, _)| *id);
    if order.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::DuplicateId("image ids must be unique".into()));
    }
    let per_image: Vec<Vec<(PatchIndex, Raster)>> = order
        .par_iter()
        .map(|(id, raster)| slide_windows(raster, *id, window, stride, pad))
        .collect::<Result<_>>()?;
    let max_patches_per_image = per_image.iter().map(Vec::len).max().unwrap_or(0);
    Ok(PatchSet {
        window,
        stride,
        patches: per_image.into_iter().flatten().collect(),
        image_count: order.len(),
        max_patches_per_image,
    })
}

/// Geometry of the tiling a set of patch counts came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TilingLayout {
    pub window: Extent,
    pub stride: Extent,
}

impl TilingLayout {
    /// Non-overlapping tiles, the default for inference.
    pub fn tiles(window: Extent) -> Self {
        TilingLayout {
            window,
            stride: window,
        }
    }
}

/// Sums per-patch counts of one image.
///
/// The patches must partition the image: overlapping layouts are rejected
/// rather than blended.
pub fn stitch_counts(patch_counts: &[(PatchIndex, f64)], layout: TilingLayout) -> Result<f64> {
    validate_geometry(layout.window, layout.stride)?;
    if layout.stride.0 < layout.window.0 || layout.stride.1 < layout.window.1 {
        return Err(Error::OverlapNotAllowed(format!(
            "stride {:?} is smaller than window {:?}",
            layout.stride, layout.window
        )));
    }
    let mut offsets: Vec<(u32, usize, usize)> = patch_counts
        .iter()
        .map(|(p, _)| (p.id.image, p.top, p.left))
        .collect();
    offsets.sort_unstable();
    if offsets.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::OverlapNotAllowed("two patches share an offset".into()));
    }
    for (p, _) in patch_counts {
        if p.top % layout.stride.0 != 0 || p.left % layout.stride.1 != 0 {
            return Err(Error::OverlapNotAllowed(format!(
                "patch {} at ({}, {}) is off the tiling grid",
                p.id, p.top, p.left
            )));
        }
    }
    Ok(patch_counts.iter().map(|(_, c)| c).sum())
}

/// Picks, from a (possibly overlapping) sliding-window grid, the patches that
/// form a non-overlapping tiling. Requires the window to be a multiple of the stride.
pub fn tiling_subset(ids: &[FragmentId], window: Extent, stride: Extent) -> Result<Vec<PatchIndex>> {
    validate_geometry(window, stride)?;
    if !window.0.is_multiple_of(stride.0) || !window.1.is_multiple_of(stride.1) {
        return Err(Error::OverlapNotAllowed(format!(
            "window {window:?} is not a multiple of stride {stride:?}"
        )));
    }
    let step = (window.0 / stride.0, window.1 / stride.1);
    Ok(ids
        .iter()
        .filter(|id| (id.row as usize).is_multiple_of(step.0) && (id.col as usize).is_multiple_of(step.1))
        .map(|&id| PatchIndex {
            id,
            top: id.row as usize * stride.0,
            left: id.col as usize * stride.1,
        })
        .collect())
}
