use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is rank deficient")]
    RankDeficient,
    #[error("basis is not semi-orthonormal (deviation {0:e})")]
    NotOrthonormal(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is not positive semi-definite")]
    NotPsd,
    #[error("matrix is not positive definite")]
    NotPd,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("observed-block covariance is singular for pattern {0}")]
    SingularObservedBlock(usize),
    #[error("predictor second-moment accumulator A3 is singular")]
    SingularA3,
    #[error("M_k + U_k is singular at 1-D step {0}")]
    SingularMkPlusUk(usize),
    #[error("column {0} is entirely missing")]
    AllMissingColumn(String),
    #[error("row {0} is entirely missing")]
    AllMissingRow(usize),
    #[error("predictor value {value} in row {row} is not in the support {{0, {scale}}}")]
    InvalidPredictorValue { row: usize, value: f64, scale: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("need at least {needed} complete rows, found {found}")]
    TooFewCompleteRows { needed: usize, found: usize },
    #[error("every bootstrap replicate failed")]
    AllReplicatesFailed,
    #[error("dimensions too small for the missingness mechanism: {0}")]
    DimensionTooSmallForMechanism(String),
}

impl Error {
    /// True for failures caused by the numbers rather than by the inputs' shape
    /// or validity.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient
                | Error::NotPsd
                | Error::NotPd
                | Error::NonFinite(_)
                | Error::SingularObservedBlock(_)
                | Error::SingularA3
                | Error::SingularMkPlusUk(_)
                | Error::AllReplicatesFailed
        )
    }
}
