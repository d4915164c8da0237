use thiserror::Error;

/// Errors produced by the analysis kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum KoopmanError {
    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("unknown parameter `{parameter}` for system `{system}`")]
    UnknownParameter { system: String, parameter: String },

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("non-finite input ({0})")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("trajectory escaped (|x| > {bound:e}) at t = {time}")]
    FiniteEscape { time: f64, bound: f64 },

    #[error("integrator exceeded {0} steps")]
    StepLimit(usize),

    #[error("Gram matrix is rank deficient (rank {rank} of {size}); use a positive ridge")]
    RankDeficient { rank: usize, size: usize },

    #[error("dictionary size {size} exceeds cap {cap}")]
    DictionaryTooLarge { size: usize, cap: usize },

    #[error("dictionary mismatch: {0}")]
    DictionaryMismatch(String),

    #[error("point outside the eigenfunction domain")]
    OutsideDomain,

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("matrix is defective (eigenvector condition number {0:e})")]
    Defective(f64),

    #[error("no null (lambda = 0) mode in the lifted model")]
    NoNullMode,

    #[error("control inputs never excite the control observables; add nonzero-u data")]
    NoExcitation,

    #[error("empty data set ({0})")]
    Empty(&'static str),
}

pub type Result<T, E = KoopmanError> = std::result::Result<T, E>;
