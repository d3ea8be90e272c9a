use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported tensor order {0} (expected 1, 2 or 3)")]
    UnsupportedOrder(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unfolding mode {mode} out of range for order {order}")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("identifiability check failed for p={order}: sigma_min={sigma_min:e}")]
    Identifiability { order: usize, sigma_min: f64 },

    #[error("pre-flight identifiability check failed for p={order}: sigma_min={sigma_min:e} <= {threshold:e}")]
    PreFlight {
        order: usize,
        sigma_min: f64,
        threshold: f64,
    },

    #[error("top-{k} eigenvalues (by magnitude) of the second moment are not all positive; spectrum: {spectrum:?}")]
    RankDeficient { k: usize, spectrum: Vec<f64> },

    #[error("non-positive tensor eigenvalue a_{index} = {value:e}")]
    NonPositiveEigenvalue { index: usize, value: f64 },

    #[error("weighted design singular for component {0}")]
    ComponentCollapse(usize),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("feature expression `{expr}`: {reason}")]
    FeatureParse { expr: String, reason: String },

    #[error("too many components for exhaustive alignment (k={0} > 8); use greedy alignment")]
    TooManyComponents(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
