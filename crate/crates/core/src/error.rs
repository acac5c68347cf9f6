use std::path::PathBuf;

use crate::ids::FragmentId;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by every module of the crate.
///
/// Each variant carries a stable kebab-case code (see [`Error::code`]) that the
/// command line surfaces verbatim.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid-raster: {0}")]
    InvalidRaster(String),
    #[error("raster-too-small: raster {height}x{width} is smaller than window {window_h}x{window_w}")]
    RasterTooSmall {
        height: usize,
        width: usize,
        window_h: usize,
        window_w: usize,
    },
    #[error("raster-not-fitting: extent {extent} does not fit window {window} with stride {stride}; use edge padding")]
    RasterNotFitting {
        extent: usize,
        window: usize,
        stride: usize,
    },
    #[error("invalid-stride: stride must be at least 1 in both axes")]
    InvalidStride,
    #[error("invalid-window: window must be at least 1 in both axes")]
    InvalidWindow,
    #[error("overlap-not-allowed: {0}")]
    OverlapNotAllowed(String),

    #[error("manifest-mismatch: {0}")]
    ManifestMismatch(String),
    #[error("corrupt-feature: record {index} has a non-finite component")]
    CorruptFeature { index: usize },
    #[error("checksum-mismatch: {0}")]
    ChecksumMismatch(String),
    #[error("duplicate-id: {0}")]
    DuplicateId(String),
    #[error("zero-vector: record {index} has zero norm")]
    ZeroVector { index: usize },
    #[error("dim-mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("dim-mismatch: raster {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid-parameter: {0}")]
    InvalidParameter(String),

    #[error("k-too-large: k = {k} but the graph has only {nodes} nodes")]
    KTooLarge { k: usize, nodes: usize },
    #[error("bad-partition: {0}")]
    BadPartition(String),
    #[error("graph-features-mismatch: graph was built from a different feature set")]
    GraphFeaturesMismatch,

    #[error("invalid-initial-state: {0}")]
    InvalidInitialState(String),
    #[error("solver-stagnated: residual {residual:e} after {iterations} iterations")]
    SolverStagnated { residual: f64, iterations: usize },

    #[error("fragment-dim-mismatch: {left:?} vs {right:?}")]
    FragmentDimMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("missing-fragment: match {target_id} -> {source_id} has no stored {store} fragment")]
    MissingFragment {
        target_id: FragmentId,
        source_id: FragmentId,
        store: &'static str,
    },

    #[error("length-mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty-input: {0}")]
    EmptyInput(String),
    #[error("head-out-of-bounds: head ({row}, {col}) outside {height}x{width}")]
    HeadOutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("invalid-config: {0}")]
    InvalidConfig(String),
    #[error("features-missing: {0}")]
    FeaturesMissing(PathBuf),
    #[error("trainer-failed: iteration {iteration} exited with {status}")]
    TrainerFailed { iteration: usize, status: String },
    #[error("workspace-locked: {0} is owned by another pipeline")]
    WorkspaceLocked(PathBuf),
    #[error("journal-corrupt: {0}")]
    JournalCorrupt(String),

    #[error("bad-format: {0}")]
    BadFormat(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, e.g. `"raster-too-small"`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidRaster(_) => "invalid-raster",
            Error::RasterTooSmall { .. } => "raster-too-small",
            Error::RasterNotFitting { .. } => "raster-not-fitting",
            Error::InvalidStride => "invalid-stride",
            Error::InvalidWindow => "invalid-window",
            Error::OverlapNotAllowed(_) => "overlap-not-allowed",
            Error::ManifestMismatch(_) => "manifest-mismatch",
            Error::CorruptFeature { .. } => "corrupt-feature",
            Error::ChecksumMismatch(_) => "checksum-mismatch",
            Error::DuplicateId(_) => "duplicate-id",
            Error::ZeroVector { .. } => "zero-vector",
            Error::DimMismatch { .. } | Error::ShapeMismatch { .. } => "dim-mismatch",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::KTooLarge { .. } => "k-too-large",
            Error::BadPartition(_) => "bad-partition",
            Error::GraphFeaturesMismatch => "graph-features-mismatch",
            Error::InvalidInitialState(_) => "invalid-initial-state",
            Error::SolverStagnated { .. } => "solver-stagnated",
            Error::FragmentDimMismatch { .. } => "fragment-dim-mismatch",
            Error::MissingFragment { .. } => "missing-fragment",
            Error::LengthMismatch { .. } => "length-mismatch",
            Error::EmptyInput(_) => "empty-input",
            Error::HeadOutOfBounds { .. } => "head-out-of-bounds",
            Error::InvalidConfig(_) => "invalid-config",
            Error::FeaturesMissing(_) => "features-missing",
            Error::TrainerFailed { .. } => "trainer-failed",
            Error::WorkspaceLocked(_) => "workspace-locked",
            Error::JournalCorrupt(_) => "journal-corrupt",
            Error::BadFormat(_) => "bad-format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
