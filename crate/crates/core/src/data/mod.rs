//! Embedding records, the dataset container, splits and synthetic data.

mod io;
mod record;
mod split;
mod synth;

use thiserror::Error;

pub use io::{
    decode_blob, decode_tensors, encode_blob, encode_tensors, read_dataset, write_dataset, DatasetManifest, GroupInfo,
    NamedTensor, Provenance, RecordMeta, Split, BLOB_FILE, FORMAT_VERSION, MAGIC, MANIFEST_FILE,
};
pub use record::{AnswerType, EmbeddingRecord, RecordDims, SkillClass};
pub use split::{epoch_batches, split_dataset, DEFAULT_FRACTIONS};
pub use synth::{synth_generate, synth_generate_with, SynthOptions, MIN_VALID_LEN};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad magic: not an SMRT container")]
    BadMagic,
    #[error("format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated blob: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("blob has {actual} bytes, expected exactly {expected}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("manifest lists {manifest} records but the blob holds {blob}")]
    CountMismatch { manifest: usize, blob: usize },
    #[error("record {index}: invalid field '{field}'")]
    InvalidRecord { index: usize, field: &'static str },
    #[error("per-group cap {cap} exceeds group {group} of size {size}")]
    CapExceedsGroup { group: usize, cap: usize, size: usize },
    #[error("{0}")]
    Invalid(String),
}
