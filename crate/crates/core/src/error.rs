use thiserror::Error;

/// Errors raised anywhere in the matching pipeline.
///
/// Each variant has a stable machine-readable code (see [`Error::code`]) that the
/// service and CLI report verbatim.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("unsupported or malformed input: {0}")]
    Format(String),

    #[error("point cloud is empty: {0}")]
    EmptyCloud(&'static str),

    #[error("partial cut discarded every point ({0})")]
    DegenerateCut(String),

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("image {width}x{height} is smaller than the {window}x{window} window")]
    TooSmall {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("training labels contain a single class")]
    DegenerateLabels,

    #[error("feature schema mismatch: {0}")]
    Schema(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("cannot build pairs: {0}")]
    Pairing(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable error code used in API responses and CLI stderr.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io(_) => "IOError",
            Error::Format(_) => "FormatError",
            Error::EmptyCloud(_) => "EmptyCloudError",
            Error::DegenerateCut(_) => "DegenerateCutError",
            Error::TooFewPoints { .. } => "TooFewPointsError",
            Error::UndefinedMetric(_) => "UndefinedMetricError",
            Error::TooSmall { .. } => "TooSmallError",
            Error::DegenerateLabels => "DegenerateLabelsError",
            Error::Schema(_) => "SchemaError",
            Error::State(_) => "StateError",
            Error::Pairing(_) => "PairingError",
            Error::InvalidArgument(_) => "InvalidArgumentError",
            Error::Csv(_) => "FormatError",
            Error::Json(_) => "FormatError",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
