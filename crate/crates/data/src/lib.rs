//! Synthetic multimodal extraction tasks: generator, answer grammar, JSONL
//! files, vocabulary and record-level F1.

pub mod gen;
pub mod grammar;
pub mod jsonl;
pub mod sample;
pub mod score;
pub mod seed;
pub mod vocab;

use std::path::{Path, PathBuf};

pub use gen::{generate, Dataset, DatasetSpec, GeneratorSpec, GeneratorTables, LookupOracle, Suite};
pub use grammar::{parse_answer, serialize, ExtractionRecord, ParsedAnswer, Slot};
pub use sample::{Family, Split, TaskSample};
pub use score::{f1, MatchCounts, Prf};
pub use vocab::Vocab;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid generator spec: {0}")]
    Spec(String),
    #[error("schema mismatch: found {found}, expected {expected}")]
    Schema { found: String, expected: String },
    #[error("malformed dataset record: {0}")]
    Format(String),
    #[error("{path}:{line}: {source}")]
    At {
        path: PathBuf,
        line: usize,
        source: Box<DataError>,
    },
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn at(self, path: &Path, line: usize) -> Self {
        Self::At {
            path: path.to_path_buf(),
            line,
            source: Box::new(self),
        }
    }
}
