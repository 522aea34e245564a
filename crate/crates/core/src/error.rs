use std::io;

use crate::codebook::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic {found:?}, expected \"CTFC\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("truncated payload while reading {section}")]
    Truncated { section: String },

    #[error("invariant violation: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("level {level} out of range 1..={levels}")]
    LevelOutOfRange { level: usize, levels: usize },

    #[error("schedule mismatch: {0}")]
    ScheduleMismatch(String),

    #[error("no relevant pairs in codebook")]
    NoRelevantPairs,

    #[error("no non-relevant pairs in codebook")]
    NoNonRelevantPairs,

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("query has no relevant gallery items")]
    NoRelevantItems,

    #[error("gallery needs {needed} bytes, cap is {cap}")]
    MemoryCap { needed: u64, cap: u64 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
