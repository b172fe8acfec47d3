use thiserror::Error;

/// Errors shared across the pipeline. Numeric error states (non-finite
/// values, degenerate geometry) are reported through this type rather than
/// panics so callers can decide whether a condition is fatal.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context} (left {left:?}, right {right:?})")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: String },

    /// The level set never crosses the grid, or crosses in too few
    /// tetrahedra to form a usable surface.
    #[error("collapsed shape: {surface_tets} surface tetrahedra (minimum {min})")]
    CollapsedShape { surface_tets: usize, min: usize },

    #[error("degenerate camera: {0}")]
    DegenerateCamera(String),

    #[error("shape spread too small to normalize (delta_k = {delta_k:.3e})")]
    DegenerateSpread { delta_k: f64 },

    #[error("invalid configuration: {0}")]
    BadConfig(String),

    #[error("checkpoint rejected: {0}")]
    BadCheckpoint(String),

    #[error("invalid input: {0}")]
    BadInput(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: u64, reason: String },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable tag for this error class, used in the CLI's
    /// structured error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::NonFinite { .. } => "non-finite",
            Error::CollapsedShape { .. } => "collapsed-shape",
            Error::DegenerateCamera(_) => "degenerate-camera",
            Error::DegenerateSpread { .. } => "degenerate-spread",
            Error::BadConfig(_) => "bad-config",
            Error::BadCheckpoint(_) => "bad-checkpoint",
            Error::BadInput(_) => "bad-input",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
