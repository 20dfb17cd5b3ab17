//! Annotations, precomputed video features, word vectors, glance
//! re-annotation and the seeded synthetic benchmark generator.

mod annotations;
mod features;
mod synth;
mod words;

use std::path::PathBuf;

use thiserror::Error;

pub use annotations::{
    load_full_annotations, load_glance_annotations, sample_glance, write_jsonl, FullAnnotation,
    GlanceAnnotation,
};
pub(crate) use annotations::{load_jsonl, Validate};
pub use features::{load_features, read_features, save_features, write_features, VideoFeatures};
pub use synth::{generate_synthetic, SynthConfig, SyntheticDataset};
pub use words::{
    load_word_vectors, save_word_vectors, tokenize, tokenize_and_embed, QueryTokens,
    WordVectorTable,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid annotation for video `{video_id}`: {message}")]
    Validation { video_id: String, message: String },
    #[error("feature file has bad magic {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("feature file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("feature matrix contains a non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("feature matrix must have at least one row and one column (got {rows} x {cols})")]
    EmptyFeatures { rows: usize, cols: usize },
    #[error("line {line}: vector has {found} entries, expected {expected}")]
    Dimension {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("query `{0}` has no tokens")]
    EmptyQuery(String),
    #[error("synthetic config: {0}")]
    Config(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}
