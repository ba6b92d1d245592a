use serde_json::json;
use thiserror::Error;

/// Exit status of a usage error (bad verb, flag or value).
pub const EXIT_USAGE: i32 = 2;
/// Exit status of a data error (missing file, invalid corpus, cache miss).
pub const EXIT_DATA: i32 = 3;
/// Exit status of a failing LLM or embedding service.
pub const EXIT_UPSTREAM: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("unknown verb `{0}`")]
    UnknownVerb(String),
    #[error("unknown flag {0}")]
    UnknownFlag(String),
    #[error("missing required flag {0}")]
    MissingRequired(String),
    #[error("invalid value `{value}` for {flag}: {reason}")]
    InvalidValue { flag: String, value: String, reason: String },
    /// Help or version text was requested; printed on stdout, exit 0.
    #[error("{0}")]
    Help(String),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Engine(#[from] photocue::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Help(_) => 0,
            CliError::UnknownVerb(_)
            | CliError::UnknownFlag(_)
            | CliError::MissingRequired(_)
            | CliError::InvalidValue { .. }
            | CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } | CliError::Data(_) => EXIT_DATA,
            CliError::Engine(e) if e.is_upstream() => EXIT_UPSTREAM,
            CliError::Engine(_) => EXIT_DATA,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::UnknownVerb(_) => "unknown_verb",
            CliError::UnknownFlag(_) => "unknown_flag",
            CliError::MissingRequired(_) => "missing_required",
            CliError::InvalidValue { .. } => "invalid_value",
            CliError::Help(_) => "help",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Data(_) => "data",
            CliError::Engine(e) if e.is_upstream() => "upstream",
            CliError::Engine(_) => "data",
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> serde_json::Value {
        json!({"error": self.kind(), "message": self.to_string(), "exit_code": self.exit_code()})
    }
}

macro_rules! engine_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Engine(e.into())
            }
        })*
    };
}

engine_from!(
    photocue::corpus::CorpusError,
    photocue::descriptor::DescriptorError,
    photocue::embedding::EmbeddingError,
    photocue::scoring::ScoringError,
    photocue::adapter::AdapterError,
    photocue::trainer::TrainError,
    photocue::eval::EvalError
);
