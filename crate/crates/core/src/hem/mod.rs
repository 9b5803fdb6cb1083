//! Hybrid token embeddings: frequent words embed through language-specific
//! parameters, rare words share a latent table learned with hard assignment.

mod assign;
mod embedder;
mod pretrain;

pub use assign::{
    assign_token, latent_similarities, prune_unused, score_latent_tokens, top_m, AssignmentMap, Exploration,
};
pub use embedder::{Embedder, HybridEmbedder, LookupMode, SpecificMode, TokenRows, WordTableEmbedder};
pub use pretrain::{pretrain_latent, read_latent_tsv, reassign, write_latent_tsv, PretrainConfig, PretrainRecord, Pretrained};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PretrainedVectors;
use crate::losses::LossError;
use crate::tensor::{Tensor, TensorError};
use crate::vocab::{pca_reduce, Pca, VocabError};

#[derive(Debug, Error)]
pub enum HemError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("word {word} is not in the vocabulary of language #{lang}")]
    UnknownWord { lang: usize, word: usize },
    #[error("cannot score a zero vector")]
    ZeroVector,
    #[error("assignment: {0}")]
    Assignment(String),
    #[error("parameter {0:?} missing from the store")]
    MissingParam(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HemError>;

/// Shape of the hybrid embedder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HemConfig {
    /// Number of most frequent words per language kept language-specific.
    pub k: usize,
    pub universal_dim: usize,
    pub reduced_dim: usize,
    pub latent_size: usize,
    pub specific_mode: SpecificMode,
}

impl Default for HemConfig {
    fn default() -> Self {
        Self {
            k: 30,
            universal_dim: 64,
            reduced_dim: 10,
            latent_size: 200,
            specific_mode: SpecificMode::Projected,
        }
    }
}

impl HemConfig {
    pub fn full_scale() -> Self {
        Self {
            k: 5000,
            universal_dim: 512,
            reduced_dim: 50,
            latent_size: 40_000,
            specific_mode: SpecificMode::Projected,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.universal_dim == 0 || self.reduced_dim == 0 {
            return Err(HemError::Config("dimensions must be positive".into()));
        }
        if self.latent_size == 0 {
            return Err(HemError::Config("latent table needs at least one row".into()));
        }
        Ok(())
    }
}

/// Subtracts each language's mean vector, removing the per-language offset
/// that otherwise dominates every word's direction.
pub fn center_per_language(vectors: &PretrainedVectors) -> Vec<Vec<Vec<f64>>> {
    (0..vectors.languages().len())
        .map(|l| {
            let table = vectors.table(l);
            let mut mean = vec![0.0; vectors.dim()];
            for row in table {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v / table.len() as f64;
                }
            }
            table
                .iter()
                .map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect())
                .collect()
        })
        .collect()
}

/// Centers each language, fits one PCA on the pooled vectors (so the reduced
/// spaces share a basis) and returns each language's reduced table.
pub fn reduce_pretrained(vectors: &PretrainedVectors, dim: usize) -> Result<(Vec<Tensor>, Pca)> {
    let centered = center_per_language(vectors);
    let pooled: Vec<Vec<f64>> = centered.iter().flatten().cloned().collect();
    let (_, pca) = pca_reduce(&pooled, dim)?;
    let tables = centered
        .iter()
        .map(|table| {
            let rows: Vec<Vec<f64>> = table.iter().map(|r| pca.project(r)).collect();
            if rows.is_empty() {
                Ok(Tensor::zeros(&[0, dim]))
            } else {
                Tensor::from_rows(&rows)
            }
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((tables, pca))
}
