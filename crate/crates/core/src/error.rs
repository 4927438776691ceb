//! Error type shared by every module in this crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus files are misaligned: {src_lines} source lines vs {tgt_lines} target lines")]
    Misaligned { src_lines: usize, tgt_lines: usize },

    #[error("line {line} of {side} is empty after tokenization")]
    EmptyLine { side: &'static str, line: usize },

    #[error("corpus `{0}` is empty")]
    EmptyCorpus(String),

    #[error("corpus `{domain}` is too small: {detail}")]
    CorpusTooSmall { domain: String, detail: String },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },

    #[error("language models were built over different vocabularies")]
    VocabMismatch,

    #[error("sequence of length {len} exceeds model position limit {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("non-finite gradient in tensor `{tensor}`")]
    NonFiniteGrad { tensor: String },

    #[error("non-finite loss at {context}")]
    NonFiniteLoss { context: String },

    #[error("curriculum window for domain `{domain}` at step {step} cannot fill a task: {detail}")]
    WindowTooSmall {
        domain: String,
        step: usize,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint `{path}` is not readable as a model checkpoint: {detail}")]
    BadCheckpoint { path: String, detail: String },

    #[error("evaluation inputs disagree: {0}")]
    EvalMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
