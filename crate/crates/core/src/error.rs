use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum OctError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("surface ordering violated at b={b}, a={a}, surface={l} ({upper} > {lower})")]
    OrderingViolation {
        b: usize,
        a: usize,
        l: usize,
        upper: f64,
        lower: f64,
    },

    #[error("label column at b={b}, a={a} is not monotone")]
    NonMonotoneColumn { b: usize, a: usize },

    #[error("distribution at surface={l}, b={b}, a={a} sums to {sum} (expected 1)")]
    Normalization { l: usize, b: usize, a: usize, sum: f64 },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite objective during sweep {sweep}")]
    Numerical { sweep: usize },

    #[error("empty surface point set: {0}")]
    EmptySurface(String),

    #[error("gradient norm sum of surface {surface} is zero (flat ground truth)")]
    FlatSurface { surface: usize },

    #[error("unknown loss '{0}'")]
    UnknownLoss(String),

    #[error("surfaces outside crop range {lo}..={hi}: {offenders:?}")]
    SurfaceOutsideCrop {
        lo: usize,
        hi: usize,
        /// (surface, b, a, row), 0-based indices, 1-based row.
        offenders: Vec<(usize, usize, usize, f64)>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, OctError>;
