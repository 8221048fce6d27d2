use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. `exit_code` defines the stable CLI contract:
/// 0 success, 1 config error, 2 data error, 3 training divergence,
/// 4 evaluation error.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("undefined confidence interval: {0}")]
    UndefinedCi(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("insufficient input: {0}")]
    InsufficientInput(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),
}

impl Error {
    /// Prefix the message with the pipeline stage that raised it.
    pub fn in_stage(self, stage: &str) -> Error {
        let tag = |m: String| format!("stage {stage}: {m}");
        match self {
            Error::Config(m) => Error::Config(tag(m)),
            Error::InvalidArgument(m) => Error::InvalidArgument(tag(m)),
            Error::InsufficientData(m) => Error::InsufficientData(tag(m)),
            Error::CheckpointFormat(m) => Error::CheckpointFormat(tag(m)),
            Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), tag(io.to_string()))),
            Error::Internal(m) => Error::Internal(tag(m)),
            Error::TrainingDiverged(m) => Error::TrainingDiverged(tag(m)),
            Error::NumericOverflow(m) => Error::NumericOverflow(tag(m)),
            Error::UndefinedMetric(m) => Error::UndefinedMetric(tag(m)),
            Error::UndefinedCi(m) => Error::UndefinedCi(tag(m)),
            Error::DegenerateGeometry(m) => Error::DegenerateGeometry(tag(m)),
            Error::InsufficientInput(m) => Error::InsufficientInput(tag(m)),
            Error::MissingArtifact(m) => Error::MissingArtifact(tag(m)),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::InvalidArgument(_)
            | Error::InsufficientData(_)
            | Error::InsufficientInput(_)
            | Error::CheckpointFormat(_)
            | Error::Io(_)
            | Error::Internal(_) => 2,
            Error::TrainingDiverged(_) | Error::NumericOverflow(_) => 3,
            Error::UndefinedMetric(_)
            | Error::UndefinedCi(_)
            | Error::DegenerateGeometry(_)
            | Error::MissingArtifact(_) => 4,
        }
    }
}
