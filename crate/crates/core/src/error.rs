use std::path::PathBuf;

/// Errors raised by the words-as-classifiers pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid corpus: {0}")]
    Corpus(String),

    #[error("invalid split ratios ({train}, {val}, {test}): must be nonnegative and sum to 1")]
    SplitRatios { train: f64, val: f64, test: f64 },

    #[error("image {0} has zero area")]
    ZeroAreaImage(String),

    #[error("feature table: {0}")]
    FeatureTable(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("min_count must be at least 1, got {0}")]
    MinCount(usize),

    #[error("no eligible negative regions for word {0:?}")]
    NoEligibleNegatives(String),

    #[error("word {word:?}: {message}")]
    Training { word: String, message: String },

    #[error("model: {0}")]
    Model(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
