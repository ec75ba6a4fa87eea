//! Crate-wide error type.
//!
//! Recoverable conditions (guardrail failures, per-item backend errors) are
//! carried as data inside the structures that produced them; this enum is for
//! hard failures that abort an operation.

use std::path::PathBuf;

use thiserror::Error;

use crate::gateway::LlmExchange;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    IoPath {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A structurally broken record in a line-oriented input file.
    #[error("line {line}: {reason}")]
    Record { line: usize, reason: String },

    #[error("duplicate document id `{id}`")]
    DuplicateDocId { id: String },

    #[error("unknown filter rule `{rule}`")]
    UnknownFilterRule { rule: String },

    #[error("invalid filter rule `{rule}`: {reason}")]
    InvalidFilterRule { rule: String, reason: String },

    /// Precondition violation on an operation argument.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Markdown taxonomy table that does not parse.
    #[error("taxonomy table{}: {reason}", row.map(|r| format!(" row {r}")).unwrap_or_default())]
    TaxonomyFormat { row: Option<usize>, reason: String },

    /// A reply payload (assignment, choice, cluster name, ...) that does not parse.
    #[error("reply payload: {0}")]
    Payload(String),

    #[error("template `{template}`: missing slot `{slot}`")]
    MissingSlot { template: String, slot: String },

    #[error("template `{template}`: required slot `{slot}` absent from body")]
    SlotNotInBody { template: String, slot: String },

    /// Retry budget exhausted on a chained prompt; carries the full exchange log.
    #[error("`{}` exhausted retries after {} attempts", exchange.template, exchange.attempts)]
    Exhausted { exchange: Box<LlmExchange> },

    #[error("backend `{backend}`: {reason}")]
    Backend { backend: String, reason: String },

    #[error("configuration: {0}")]
    Config(String),

    /// A pipeline stage that cannot produce a usable result.
    #[error("{stage}: {reason}")]
    Pipeline { stage: String, reason: String },

    #[error("model file: {0}")]
    ModelFormat(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn pipeline(stage: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Pipeline {
            stage: stage.into(),
            reason: reason.into(),
        }
    }
}
