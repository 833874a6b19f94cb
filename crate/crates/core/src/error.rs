use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no label-disjoint pair found after {attempts} rejection attempts")]
    SamplingExhausted { attempts: usize },

    #[error("non-finite value at step {step} in {block} (l_cos={l_cos}, l_class={l_class}, l2={l2})")]
    NonFinite {
        step: u64,
        block: String,
        l_cos: f64,
        l_class: f64,
        l2: f64,
    },

    #[error("embedding store is empty")]
    EmptyStore,

    #[error("duplicate video id {0:?}")]
    DuplicateId(String),

    #[error("unknown video id {0:?}")]
    UnknownId(String),

    #[error("k={k} out of range 1..={n}")]
    KOutOfRange { k: usize, n: usize },

    #[error("pool size {pool} exceeds store size {n}")]
    PoolTooLarge { pool: usize, n: usize },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Problems found while decoding corpus, checkpoint and CSV files.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic bytes at offset 0: expected {expected:?}")]
    BadMagic { expected: &'static [u8] },

    #[error("unsupported format version {found} (this build reads {supported})")]
    Version { found: u32, supported: u32 },

    #[error("file truncated at byte {offset} while reading record {record}")]
    Truncated { offset: u64, record: u64 },

    #[error("record {record} at byte {offset}: {field} has length {actual}, header says {expected}")]
    DimMismatch {
        record: u64,
        offset: u64,
        field: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("record {record} at byte {offset}: duplicate id {id:?}")]
    DuplicateId { record: u64, offset: u64, id: String },

    #[error("record {record} at byte {offset}: {reason}")]
    InvalidRecord { record: u64, offset: u64, reason: String },

    #[error("{extra} trailing bytes after record {count} at byte {offset}")]
    TrailingBytes { count: u64, offset: u64, extra: u64 },

    #[error("line {line}: {reason}")]
    Csv { line: u64, reason: String },

    #[error("checkpoint shape mismatch in {block}: expected {expected}, found {found}")]
    Shape {
        block: String,
        expected: String,
        found: String,
    },

    #[error("checkpoint corrupted at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
