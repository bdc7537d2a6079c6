use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    ConllParse { line: usize, message: String },

    #[error("invalid sentence {id}: {message}")]
    InvalidSentence { id: String, message: String },

    #[error("cannot sample {requested} seeds from a train split of {available}")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("lexicon row {row}: {message}")]
    Lexicon { row: usize, message: String },

    #[error("invalid augmentation config: {0}")]
    AugmentConfig(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("replay miss for request `{tag}`: fingerprint {fingerprint} not in cassette")]
    ReplayMiss { tag: String, fingerprint: String },

    #[error("mock script exhausted for request `{tag}`")]
    MockExhausted { tag: String },

    #[error("backend failure for request `{tag}`: {message}")]
    Backend { tag: String, message: String },

    #[error("cassette line {line}: {message}")]
    CassetteLoad { line: usize, message: String },

    #[error("invalid completion request: {0}")]
    InvalidRequest(String),

    #[error("template `{template}`: {message}")]
    Template { template: String, message: String },

    #[error("cannot build prompt: {0}")]
    Prompt(String),

    #[error("abstraction reply is missing field `{field}`")]
    AbstractionField { field: &'static str },

    #[error("abstraction reply is not parseable: {0}")]
    AbstractionFormat(String),

    #[error("budget shortfall: {available} candidates available for a target of {target} ({seeds_covered} seeds contributed, {seeds_skipped} skipped)")]
    Shortfall {
        target: usize,
        available: usize,
        seeds_covered: usize,
        seeds_skipped: usize,
    },

    #[error("BLEU needs non-empty candidate and reference token lists")]
    EmptyInput,

    #[error("invalid run config: {0}")]
    Config(String),

    #[error("manifest check failed: {0}")]
    Manifest(String),

    #[error("evaluation result {index}: {message}")]
    EvalResult { index: usize, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the completion transport (as opposed to bad model output).
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::ReplayMiss { .. }
                | Error::MockExhausted { .. }
                | Error::Backend { .. }
                | Error::CassetteLoad { .. }
        )
    }

    pub fn is_shortfall(&self) -> bool {
        matches!(self, Error::Shortfall { .. })
    }
}
