//! Training objectives: hinge triplets with in-batch hard-negative mining,
//! masked cross-language reconstruction, the adversarial language
//! classifier, neighborhood constraints and the bidirectional multimodal loss.

mod mclm;
mod triplet;

pub use mclm::{choose_mask, mask_count, mclm_loss, reconstruction_terms};
pub use triplet::{
    hard_triplet_loss, mine_hard_negatives, mined_triplet_loss, triplet_loss, triplet_value, Triplet,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batch has no valid negative")]
    NoNegative,
    #[error("cannot mask a sentence of length {0}")]
    TooShort(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the sentence-anchored multimodal direction.
    pub lambda1: f64,
    pub lambda_mask: f64,
    pub lambda_adv: f64,
    pub lambda_nc: f64,
    pub margin: f64,
    pub top_n: usize,
    pub mask_ratio: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.5,
            lambda_mask: 1e-4,
            lambda_adv: 1e-6,
            lambda_nc: 5e-2,
            margin: 0.05,
            top_n: 10,
            mask_ratio: 0.2,
        }
    }
}

impl LossWeights {
    pub fn check(&self) -> std::result::Result<(), String> {
        let all = [self.lambda1, self.lambda_mask, self.lambda_adv, self.lambda_nc, self.margin];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err("loss weights and margin must be finite and non-negative".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err("mask_ratio must lie in (0, 1)".into());
        }
        Ok(())
    }
}

/// Bidirectional multimodal loss: image-anchored triplets plus `λ1` times
/// sentence-anchored triplets, each over the top-N violations.
/// `sentence_item[q]` is the row of `images` that sentence `q` describes.
pub fn multimodal_loss(
    g: &mut Graph,
    images: NodeId,
    sentences: NodeId,
    sentence_item: &[usize],
    weights: &LossWeights,
) -> Result<NodeId> {
    if g.value(sentences).rows() != sentence_item.len() {
        return Err(LossError::Shape("one item index per sentence required".into()));
    }
    let d_is = g.pairwise_cosine_distance(images, sentences)?;
    let img_anchor = hard_triplet_loss(g, d_is, |i, q| sentence_item[q] == i, weights.margin, weights.top_n)?;
    let d_si = g.transpose(d_is)?;
    let sent_anchor = hard_triplet_loss(g, d_si, |q, i| sentence_item[q] == i, weights.margin, weights.top_n)?;
    let scaled = g.scale(sent_anchor, weights.lambda1)?;
    Ok(g.add(img_anchor, scaled)?)
}

/// Sentence–sentence constraints: row `b` of `first` should be nearer row `b`
/// of `second` than any other row of `second`.
pub fn neighborhood_loss(g: &mut Graph, first: NodeId, second: NodeId, weights: &LossWeights) -> Result<NodeId> {
    let d = g.pairwise_cosine_distance(first, second)?;
    hard_triplet_loss(g, d, |a, c| a == c, weights.margin, weights.top_n)
}

/// Two-layer language classifier behind a gradient-reversal node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LanguageClassifier {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl LanguageClassifier {
    pub const HIDDEN: usize = 64;

    pub fn register(store: &mut ParamStore, prefix: &str, input: usize, languages: usize, rng: &mut impl rand::Rng) -> Self {
        let w1 = store.add(format!("{prefix}.w1"), glorot(rng, input, Self::HIDDEN), true);
        let b1 = store.add(format!("{prefix}.b1"), Tensor::zeros(&[Self::HIDDEN]), true);
        let w2 = store.add(format!("{prefix}.w2"), glorot(rng, Self::HIDDEN, languages), true);
        let b2 = store.add(format!("{prefix}.b2"), Tensor::zeros(&[languages]), true);
        Self { w1, b1, w2, b2 }
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, reps: NodeId) -> Result<NodeId> {
        let (w1, b1, w2, b2) = (
            g.param(store, self.w1),
            g.param(store, self.b1),
            g.param(store, self.w2),
            g.param(store, self.b2),
        );
        let h = g.linear(reps, w1, b1)?;
        let h = g.relu(h)?;
        Ok(g.linear(h, w2, b2)?)
    }
}

/// Cross-entropy of the classifier on reversed-gradient sentence reps: the
/// classifier descends the loss while everything upstream ascends it.
pub fn adversarial_loss(
    g: &mut Graph,
    store: &ParamStore,
    reps: NodeId,
    labels: Vec<usize>,
    classifier: &LanguageClassifier,
) -> Result<NodeId> {
    let reversed = g.gradient_reversal(reps)?;
    let logits = classifier.logits(g, store, reversed)?;
    Ok(g.softmax_cross_entropy(logits, labels)?)
}

/// Unweighted loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub multimodal: NodeId,
    pub mask: NodeId,
    pub adversarial: NodeId,
    pub neighborhood: NodeId,
}

/// Scalar values of each term and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub multimodal: f64,
    pub mask: f64,
    pub adversarial: f64,
    pub neighborhood: f64,
    pub total: f64,
}

impl LossTerms {
    /// `L_mm + λ_mask·L_mask + λ_adv·L_adv + λ_nc·L_nc`
    pub fn total(&self, g: &mut Graph, w: &LossWeights) -> Result<NodeId> {
        let mask = g.scale(self.mask, w.lambda_mask)?;
        let adv = g.scale(self.adversarial, w.lambda_adv)?;
        let nc = g.scale(self.neighborhood, w.lambda_nc)?;
        let t = g.add(self.multimodal, mask)?;
        let t = g.add(t, adv)?;
        Ok(g.add(t, nc)?)
    }

    pub fn breakdown(&self, g: &Graph, w: &LossWeights) -> LossBreakdown {
        let v = |n: NodeId| g.value(n).item();
        let (mm, mask, adv, nc) = (v(self.multimodal), v(self.mask), v(self.adversarial), v(self.neighborhood));
        LossBreakdown {
            multimodal: mm,
            mask,
            adversarial: adv,
            neighborhood: nc,
            total: mm + w.lambda_mask * mask + w.lambda_adv * adv + w.lambda_nc * nc,
        }
    }
}

/// Uniform Glorot initialization for a `rows × cols` weight.
pub fn glorot(rng: &mut impl rand::Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols).max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}
