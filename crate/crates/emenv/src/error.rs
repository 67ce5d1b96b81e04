use std::path::PathBuf;

use emenv_core::Error as CoreError;

/// Everything the command line can fail with. Each variant has a stable code
/// and exit status.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("data file {} does not exist", .0.display())]
    DataFileNotFound(PathBuf),
    #[error("column {0:?} is not in the header")]
    MissingColumn(String),
    #[error("row {row}, column {column:?}: {value:?} is not a number")]
    NonNumericCell { row: usize, column: String, value: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl AppError {
    pub fn code(&self) -> &'static str {
        match self {
            AppError::Usage(_) => "Usage",
            AppError::Config(_) => "InvalidConfig",
            AppError::DataFileNotFound(_) => "DataFileNotFound",
            AppError::MissingColumn(_) => "MissingColumn",
            AppError::NonNumericCell { .. } => "NonNumericCell",
            AppError::Io(_) => "Io",
            AppError::Csv(_) => "MalformedTable",
            AppError::Core(e) => core_code(e),
        }
    }

    /// 2 for usage and configuration, 3 for data, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) | AppError::Config(_) => 2,
            AppError::Core(CoreError::InvalidArgument(_)) => 2,
            AppError::Core(e) if e.is_numerical() => 4,
            _ => 3,
        }
    }
}

fn core_code(e: &CoreError) -> &'static str {
    match e {
        CoreError::NotSymmetric(_) => "NotSymmetric",
        CoreError::RankDeficient => "RankDeficient",
        CoreError::NotOrthonormal(_) => "NotOrthonormal",
        CoreError::ShapeMismatch(_) => "ShapeMismatch",
        CoreError::NotPsd => "NotPsd",
        CoreError::NotPd => "NotPd",
        CoreError::NonFinite(_) => "NonFinite",
        CoreError::SingularObservedBlock(_) => "SingularObservedBlock",
        CoreError::SingularA3 => "SingularA3",
        CoreError::SingularMkPlusUk(_) => "SingularMkPlusUk",
        CoreError::AllMissingColumn(_) => "AllMissingColumn",
        CoreError::AllMissingRow(_) => "AllMissingRow",
        CoreError::InvalidPredictorValue { .. } => "InvalidPredictorValue",
        CoreError::InvalidArgument(_) => "InvalidArgument",
        CoreError::TooFewCompleteRows { .. } => "TooFewCompleteRows",
        CoreError::AllReplicatesFailed => "AllReplicatesFailed",
        CoreError::DimensionTooSmallForMechanism(_) => "DimensionTooSmallForMechanism",
    }
}

pub type AppResult<T> = Result<T, AppError>;
