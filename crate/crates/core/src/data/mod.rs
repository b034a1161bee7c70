//! Tokenization, vocabulary, topic labels, feature files, corpora and the
//! planted-signal synthetic generator.

pub mod corpus;
pub mod embed;
pub mod features;
pub mod labels;
pub mod synth;
pub mod tokenize;
pub mod vocab;

pub use corpus::{read_corpus, read_jsonl, split_by_patient, write_corpus, write_jsonl, CorpusEntry, Split, SplitManifest};
pub use embed::{image_embedding, report_embedding};
pub use features::{FeatureFile, FeatureKind};
pub use labels::derive_topic_labels;
pub use synth::{synth_corpus, SynthConfig, SynthCorpus};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{build_vocab, VocabPolicy, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("bad magic: not a {0} file")]
    BadMagic(&'static str),
    #[error("unsupported {what} version {found} (expected {expected})")]
    Version { what: &'static str, found: u32, expected: u32 },
    #[error("{what}: expected {expected}, found {actual}")]
    Shape { what: String, expected: String, actual: String },
    #[error("truncated {0} file")]
    Truncated(&'static str),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("missing ids: {}", .0.join(", "))]
    MissingIds(Vec<String>),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;
