use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("no documents passed filter (min_tokens={min_tokens}, dropped={dropped})")]
    NoDocuments { min_tokens: usize, dropped: usize },

    #[error("document id {doc_id} out of range (store has {len} documents)")]
    DocOutOfRange { doc_id: usize, len: usize },

    #[error("offset {offset} out of range for document of length {doc_len}")]
    OffsetOutOfRange { offset: usize, doc_len: usize },

    #[error("empty loss sequence")]
    EmptyLosses,

    #[error("expected {expected} losses for the served window, got {got}")]
    LossCount { expected: usize, got: usize },

    #[error("traversal already finished at cursor {cursor}")]
    Finished { cursor: usize },

    #[error("loss callback failed for doc {doc_id} at offset {offset}: {message}")]
    Callback {
        doc_id: usize,
        offset: usize,
        message: String,
    },

    #[error("empty trace collection")]
    EmptyTraces,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown config key `{key}`; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },

    #[error("window length {len} outside [2, {max}]")]
    WindowLength { len: usize, max: usize },

    #[error("token id {token} outside vocabulary of size {vocab}")]
    VocabOverflow { token: u32, vocab: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("empty prefix")]
    EmptyPrefix,

    #[error("non-finite loss at step {step} (docs {doc_ids:?})")]
    NonFiniteLoss { step: usize, doc_ids: Vec<usize> },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("bad checkpoint magic")]
    BadMagic,

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    #[error("checkpoint/config mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("empty evaluation set")]
    EmptyEval,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedLine { .. } => "malformed_line",
            Error::NoDocuments { .. } => "no_documents",
            Error::DocOutOfRange { .. } => "doc_out_of_range",
            Error::OffsetOutOfRange { .. } => "offset_out_of_range",
            Error::EmptyLosses => "empty_losses",
            Error::LossCount { .. } => "loss_count",
            Error::Finished { .. } => "finished",
            Error::Callback { .. } => "callback",
            Error::EmptyTraces => "empty_traces",
            Error::Config(_) => "config",
            Error::UnknownKey { .. } => "unknown_key",
            Error::WindowLength { .. } => "window_length",
            Error::VocabOverflow { .. } => "vocab_overflow",
            Error::Dimension { .. } => "dimension",
            Error::EmptyPrefix => "empty_prefix",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Truncated(_) => "truncated",
            Error::BadMagic => "bad_magic",
            Error::Version { .. } => "version",
            Error::ParamMismatch(_) => "param_mismatch",
            Error::CheckpointMismatch(_) => "checkpoint_mismatch",
            Error::EmptyEval => "empty_eval",
            Error::EmptyInput(_) => "empty_input",
            Error::Json(_) => "json",
        }
    }
}
