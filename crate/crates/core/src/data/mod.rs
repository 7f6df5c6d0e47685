//! Preference data: records on disk, byte tokenization, batching and the
//! planted-error synthetic task.

mod batch;
mod records;
pub mod synthetic;
pub mod tokenizer;

pub use batch::{batch_iter, batch_order, batches_per_epoch, BatchIter, PairBatch, SequenceBatch};
pub use records::{
    load_records, parse_records, tokenize_records, write_records, PreferencePair, PreferenceRecord,
};
pub use synthetic::{make_synthetic_planted_task, planted_sft_corpus, planted_task_score, SftExample};
pub use tokenizer::Tokenizer;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: duplicate record id `{id}`")]
    DuplicateId { id: String, line: usize },
    #[error("record `{id}`: {reason}")]
    Invalid { id: String, reason: String },
    #[error("record `{id}`: {len} tokens exceed the context length {context_len}")]
    TooLong { id: String, len: usize, context_len: usize },
    #[error("prompt length {prompt_len} invalid for a sequence of {len} tokens")]
    PromptLength { prompt_len: usize, len: usize },
    #[error("unknown token id {0}")]
    UnknownToken(u32),
    #[error("detokenized bytes are not valid UTF-8: {0}")]
    Utf8(String),
}
