use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("need at least 2 areas, got {0}")]
    TooFewAreas(usize),

    #[error("sampling covariance of area {area_id} is not symmetric")]
    AsymmetricD { area_id: String },

    #[error("sampling covariance of area {area_id} is not positive definite")]
    NonPositiveDefiniteD { area_id: String },

    #[error("stacked design matrix has rank {rank} < {s} columns")]
    RankDeficientX { rank: usize, s: usize },

    #[error("matrix is not positive semi-definite: {0}")]
    NotPsd(String),

    #[error("symmetric eigendecomposition did not converge")]
    EigenFailure,

    #[error("GLS information matrix is numerically singular")]
    SingularInformation,

    #[error("area index {index} out of range for {m} areas")]
    AreaOutOfRange { index: usize, m: usize },

    #[error("component {component} out of range for k = {k}")]
    ComponentOutOfRange { component: usize, k: usize },

    #[error("invalid simulation design: {0}")]
    InvalidDesign(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("area {0} missing from covariance file")]
    MissingArea(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the command-line front end: 2 for invalid input,
    /// 3 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::EigenFailure | Error::SingularInformation | Error::NotPsd(_) => 3,
            _ => 2,
        }
    }
}
