//! Error taxonomy mapped to process exit codes: usage and configuration
//! mistakes exit 1, malformed or missing data exits 2, numeric failures
//! (divergence, a failed gradient check) exit 3.

use glosskit::corpus::CorpusError;
use glosskit::embeddings::EmbeddingError;
use glosskit::engine::EngineError;
use glosskit::metrics::MetricsError;
use glosskit::model::ModelError;
use glosskit::sals::SalsError;
use glosskit::tokenizer::TokenizerError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SalsError> for CliError {
    fn from(e: SalsError) -> Self {
        match e {
            SalsError::BadLambda(_)
            | SalsError::BadBeta(_)
            | SalsError::MissingIndex
            | SalsError::ThresholdMismatch { .. } => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) => CliError::Usage(e.to_string()),
            EngineError::Label(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<glosskit::augment::AugmentError> for CliError {
    fn from(e: glosskit::augment::AugmentError) -> Self {
        use glosskit::augment::AugmentError::*;
        match e {
            TooManyFailures { .. } => CliError::Data(e.to_string()),
            Engine(inner) => inner.into(),
            Model(inner) => inner.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
