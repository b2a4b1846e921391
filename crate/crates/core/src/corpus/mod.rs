//! Studies, manifests, tokenization, splits and the synthetic corpus.

pub mod image;
mod manifest;
mod split;
mod study;
pub mod synthetic;
mod vocab;

pub use manifest::{parse_manifest, write_manifest, StudyRecord};
pub use split::{split_dataset, DatasetSplit};
pub use study::{load_studies, select, LoadedStudy};
pub use synthetic::{generate_synthetic_corpus, View};
pub use vocab::{
    build_vocabulary, detokenize, normalize, tokenize_report, Report, TokenizerConfig, Vocabulary, EOS, PAD, UNK,
};
