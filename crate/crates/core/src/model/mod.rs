//! The two-branch retrieval network (image branch and recurrent language
//! branch over universal token embeddings), its training driver and the
//! on-disk model directory.

mod network;
mod train;

pub use network::{score, score_matrix, MaskedNodes, SentenceNodes};
pub use train::{batch_loss, initialize, train, EpochRecord, StepRecord, TrainInputs, TrainedModel};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, LanguageId};
use crate::hem::{AssignmentMap, Embedder, HemConfig, HemError, PretrainConfig};
use crate::losses::{LossError, LossWeights};
use crate::tensor::{AdamConfig, ParamStore, TensorError};
use crate::vocab::VocabError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sentence {0} is empty")]
    EmptySentence(usize),
    #[error("parameter {0:?} missing from the store")]
    MissingParam(String),
    #[error("language {0} is not part of the model")]
    UnknownLanguage(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: usize, step: usize, detail: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("model directory: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Hem(#[from] HemError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// How the token vocabulary is embedded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum VocabChoice {
    /// Top-K specific words plus a shared latent table (K = 0 is the
    /// language-agnostic baseline).
    Hybrid,
    /// One row per word seen at least `threshold` times; the rest share UNK.
    Frequency { threshold: u64 },
    /// Full vocabulary over pretrained vectors PCA-reduced to `dim`.
    Pca { dim: usize },
    /// Rare non-pivot words borrow their pivot translation's row.
    Dictionary { threshold: u64, pivot: LanguageId },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub joint_dim: usize,
    /// Width of the image branch's hidden layer.
    pub image_hidden: usize,
    pub vocab: VocabChoice,
    /// HEM shape and latent pretraining (used when `vocab` is hybrid).
    pub pretrain: PretrainConfig,
    pub weights: LossWeights,
    /// Masked cross-language reconstruction and the masked multimodal term.
    pub mclm: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Train on a subset of the corpus languages (e.g. the pivot alone).
    pub languages: Option<Vec<LanguageId>>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            joint_dim: 64,
            image_hidden: 128,
            vocab: VocabChoice::Hybrid,
            pretrain: PretrainConfig::default(),
            weights: LossWeights::default(),
            mclm: true,
            epochs: 40,
            batch_size: 8,
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            languages: None,
            seed: 7,
        }
    }
}

impl ModelConfig {
    /// Full-scale dimensions: 512-D universal and joint spaces, 50-D
    /// reduced vectors, 40K latent rows, K = 5000.
    pub fn full_scale() -> Self {
        let mut cfg = Self {
            joint_dim: 512,
            image_hidden: 1024,
            ..Self::default()
        };
        cfg.pretrain.hem = HemConfig::full_scale();
        cfg
    }

    pub fn hem(&self) -> &HemConfig {
        &self.pretrain.hem
    }

    pub fn check(&self) -> Result<()> {
        if self.joint_dim == 0 || self.image_hidden == 0 {
            return Err(ModelError::Config("network dimensions must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(ModelError::Config("epochs must be positive".into()));
        }
        self.weights.check().map_err(ModelError::Config)?;
        self.pretrain.hem.check()?;
        if let VocabChoice::Pca { dim: 0 } = self.vocab {
            return Err(ModelError::Config("PCA dimension must be positive".into()));
        }
        if let Some(l) = &self.languages {
            if l.is_empty() {
                return Err(ModelError::Config("language subset is empty".into()));
            }
        }
        Ok(())
    }
}

/// Everything about a trained model except its parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalModel {
    pub config: ModelConfig,
    pub config_hash: String,
    pub languages: Vec<LanguageId>,
    pub feature_dim: usize,
    pub embedder: Embedder,
    /// Epoch whose parameters were kept (best validation mR).
    pub best_epoch: usize,
}

const MODEL_JSON: &str = "model.json";
const ASSIGN_TSV: &str = "assign.tsv";
const CHECKPOINT: &str = "model.ckpt";

impl RetrievalModel {
    pub fn language_index(&self, code: &str) -> Option<usize> {
        self.languages.iter().position(|l| l.as_str() == code)
    }

    /// Trainable floats across the embedder and the network.
    pub fn parameter_count(&self, store: &ParamStore) -> Result<usize> {
        let embedder = self.embedder.parameter_count(store)?;
        let network: usize = store
            .ids()
            .filter(|&id| {
                let name = store.name(id);
                !(name.starts_with("hem.") || name.starts_with("table"))
            })
            .filter(|&id| store.is_trainable(id))
            .map(|id| store.get(id).numel())
            .sum();
        Ok(embedder + network)
    }

    /// Writes `model.json`, `model.ckpt` and, for hybrid embedders, `assign.tsv`.
    pub fn save(&self, store: &ParamStore, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MODEL_JSON), serde_json::to_string_pretty(self)? + "\n")?;
        store.save(&dir.join(CHECKPOINT))?;
        if let Embedder::Hybrid(h) = &self.embedder {
            h.assignment.write_tsv(&dir.join(ASSIGN_TSV), &h.languages)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, ParamStore)> {
        let text = std::fs::read_to_string(dir.join(MODEL_JSON))?;
        let mut model: RetrievalModel = serde_json::from_str(&text)?;
        let store = ParamStore::load(&dir.join(CHECKPOINT))?;
        if let Embedder::Hybrid(h) = &mut model.embedder {
            h.assignment = AssignmentMap::read_tsv(&dir.join(ASSIGN_TSV), &h.languages, &h.vocab_sizes)?;
            if !h.assignment.frozen {
                return Err(ModelError::Format("assign.tsv is not frozen".into()));
            }
        }
        Ok((model, store))
    }
}
