//! Vocabulary statistics, the top-K frequent/rare split, and the baseline
//! vocabulary reductions (frequency threshold, pivot dictionary, PCA).

mod pca;
mod reduce;

pub use pca::{pca_reduce, Pca};
pub use reduce::{
    count_frequencies, dictionary_map, frequency_threshold, split_top_k, write_reduction_report, Dictionary,
    ReductionRow, TokenRef, VocabMapping, VocabSplit, VocabStats,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("invalid argument: {0}")]
    Config(String),
    #[error("dictionary: {0}")]
    Dictionary(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VocabError>;
