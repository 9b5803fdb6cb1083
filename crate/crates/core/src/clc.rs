//! Cross-lingual consistency: score a query through its translations into
//! every model language and fuse the per-language scores, either by a plain
//! mean or by a tiny learned aggregator.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, LanguageId, Sentence, Translator};
use crate::losses::{mine_hard_negatives, LossError, LossWeights};
use crate::model::{score_matrix, ModelError, RetrievalModel};
use crate::rng::{purpose, stream};
use crate::tensor::{Adam, AdamConfig, Graph, NodeId, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ClcError {
    #[error("expected {expected} language scores, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("no validation pairs to train on")]
    EmptyValidation,
    #[error("translation into {lang} failed: {source}")]
    Translation { lang: LanguageId, source: CorpusError },
    #[error("language {0} is not part of the model")]
    UnknownLanguage(String),
    #[error("clc weights: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T> = std::result::Result<T, ClcError>;

/// Scores of every image against every query sentence, once per model
/// language: `per_language[l]` is `images × sentences`, computed from the
/// query translated into `l` (the query's own language uses it untranslated).
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageScores {
    pub languages: Vec<LanguageId>,
    pub per_language: Vec<Tensor>,
}

impl LanguageScores {
    pub fn images(&self) -> usize {
        self.per_language[0].rows()
    }

    pub fn sentences(&self) -> usize {
        self.per_language[0].cols()
    }

    /// The `|L|` scores of image `i` against sentence `j`.
    pub fn vector(&self, i: usize, j: usize) -> Vec<f64> {
        self.per_language.iter().map(|t| t.get(i, j)).collect()
    }

    /// Every pair's score vector as rows of a `(images·sentences) × |L|`
    /// matrix, pair `(i, j)` at row `i·sentences + j`.
    pub fn stacked(&self) -> Tensor {
        let (n, m, l) = (self.images(), self.sentences(), self.languages.len());
        let mut data = Vec::with_capacity(n * m * l);
        for i in 0..n {
            for j in 0..m {
                data.extend(self.per_language.iter().map(|t| t.get(i, j)));
            }
        }
        Tensor::new(vec![n * m, l], data).expect("consistent shape")
    }

    /// Applies `fuse` to every pair's vector.
    pub fn fuse(&self, fuse: impl Fn(&[f64]) -> f64) -> Tensor {
        let (n, m) = (self.images(), self.sentences());
        let data = (0..n * m).map(|k| fuse(&self.vector(k / m, k % m))).collect();
        Tensor::new(vec![n, m], data).expect("consistent shape")
    }
}

/// Builds per-language score matrices for queries `sentences` (all in one
/// corpus language) against pre-embedded `images`. `corpus_languages` is the
/// translator's language list; every model language must appear in it.
pub fn build_score_vectors(
    model: &RetrievalModel,
    store: &ParamStore,
    images: &Tensor,
    sentences: &[&Sentence],
    corpus_languages: &[LanguageId],
    translator: &Translator,
    rng: &mut ChaCha8Rng,
) -> Result<LanguageScores> {
    let mut per_language = Vec::with_capacity(model.languages.len());
    for (m, lang) in model.languages.iter().enumerate() {
        let target = corpus_languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| ClcError::UnknownLanguage(lang.to_string()))?;
        let tokens: Vec<Vec<usize>> = sentences
            .iter()
            .map(|s| {
                if s.lang == target {
                    Ok(s.tokens.clone())
                } else {
                    translator
                        .translate(s, target, rng)
                        .map(|t| t.tokens)
                        .map_err(|source| ClcError::Translation { lang: lang.clone(), source })
                }
            })
            .collect::<Result<_>>()?;
        let batch: Vec<(usize, &[usize])> = tokens.iter().map(|t| (m, t.as_slice())).collect();
        let embedded = model.embed_sentences(store, &batch)?;
        per_language.push(score_matrix(images, &embedded));
    }
    Ok(LanguageScores {
        languages: model.languages.clone(),
        per_language,
    })
}

/// CLC-A: the arithmetic mean of the per-language scores.
pub fn clc_average(scores: &[f64]) -> f64 {
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// CLC-C: `|L| → 32` affine layer with relu, then a fixed unweighted sum of
/// the hidden units (or, optionally, a trainable `32 → 1` output layer).
#[derive(Clone, Debug, PartialEq)]
pub struct ClcClassifier {
    pub languages: usize,
    pub trainable_output: bool,
    store: ParamStore,
}

const W1: &str = "clc.w1";
const B1: &str = "clc.b1";
const W2: &str = "clc.w2";
const B2: &str = "clc.b2";

impl ClcClassifier {
    pub const HIDDEN: usize = 32;

    /// Weights drawn uniformly from `[0, 2/|L|)` (mean `1/|L|`, so each
    /// hidden unit starts near the CLC-A average). Hidden biases start at 1:
    /// cosine scores are often negative, and a zero bias would leave most
    /// units dead, collapsing every negative pair to the same fused score.
    pub fn new(languages: usize, trainable_output: bool, seed: u64) -> Self {
        let mut rng = stream(seed, purpose::CLC_INIT);
        let hi = 2.0 / languages.max(1) as f64;
        let w1 = (0..languages * Self::HIDDEN).map(|_| rng.gen_range(0.0..hi)).collect();
        let mut store = ParamStore::new();
        store.add(W1, Tensor::new(vec![languages, Self::HIDDEN], w1).expect("shape"), true);
        store.add(B1, Tensor::filled(&[Self::HIDDEN], 1.0), true);
        if trainable_output {
            let w2 = (0..Self::HIDDEN).map(|_| rng.gen_range(0.0..2.0 / Self::HIDDEN as f64)).collect();
            store.add(W2, Tensor::new(vec![Self::HIDDEN, 1], w2).expect("shape"), true);
            store.add(B2, Tensor::zeros(&[1]), true);
        }
        Self {
            languages,
            trainable_output,
            store,
        }
    }

    /// Builds a classifier from explicit first-layer weights (`|L| × 32`) and bias.
    pub fn from_weights(w1: Tensor, b1: Tensor) -> Result<Self> {
        if w1.shape().len() != 2 || w1.cols() != Self::HIDDEN || b1.numel() != Self::HIDDEN {
            return Err(ClcError::Format(format!("expected |L|×32 weights, got {:?}", w1.shape())));
        }
        let languages = w1.rows();
        let mut store = ParamStore::new();
        store.add(W1, w1, true);
        store.add(B1, b1.reshape(vec![Self::HIDDEN])?, true);
        Ok(Self {
            languages,
            trainable_output: false,
            store,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    fn get(&self, name: &str) -> &Tensor {
        self.store.get(self.store.id_of(name).expect("registered"))
    }

    pub fn fuse(&self, scores: &[f64]) -> Result<f64> {
        if scores.len() != self.languages {
            return Err(ClcError::Dimension {
                expected: self.languages,
                got: scores.len(),
            });
        }
        let (w1, b1) = (self.get(W1), self.get(B1));
        let hidden = (0..Self::HIDDEN).map(|h| {
            let pre = b1.data()[h] + scores.iter().enumerate().map(|(l, s)| s * w1.get(l, h)).sum::<f64>();
            pre.max(0.0)
        });
        Ok(if self.trainable_output {
            let (w2, b2) = (self.get(W2), self.get(B2));
            hidden.enumerate().map(|(h, v)| v * w2.data()[h]).sum::<f64>() + b2.data()[0]
        } else {
            hidden.sum()
        })
    }

    /// Fused scores as a graph node (`rows × 1`) over stacked score vectors.
    fn fuse_node(&self, g: &mut Graph, stacked: &Tensor) -> Result<NodeId> {
        let p = |g: &mut Graph, name: &str| g.param(&self.store, self.store.id_of(name).expect("registered"));
        let x = g.constant(stacked.clone());
        let (w1, b1) = (p(g, W1), p(g, B1));
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h)?;
        Ok(if self.trainable_output {
            let (w2, b2) = (p(g, W2), p(g, B2));
            g.linear(h, w2, b2)?
        } else {
            let ones = g.constant(Tensor::filled(&[Self::HIDDEN, 1], 1.0));
            g.matmul(h, ones)?
        })
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    /// Writes the weights in the checkpoint TSV format.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = ParamStore::load(path)?;
        let w1 = store
            .id_of(W1)
            .ok_or_else(|| ClcError::Format("missing clc.w1".into()))?;
        let languages = store.get(w1).rows();
        let trainable_output = store.id_of(W2).is_some();
        Ok(Self {
            languages,
            trainable_output,
            store,
        })
    }
}

/// One block of validation pairs: the score vectors of one language's
/// queries, and each sentence's ground-truth image row.
#[derive(Clone, Debug)]
pub struct ClcBlock {
    pub scores: LanguageScores,
    pub sentence_image: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClcTrainReport {
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss before each update.
    pub losses: Vec<f64>,
}

/// Multimodal triplet loss on fused scores (distance = −score) over all
/// blocks at once.
fn clc_loss(g: &mut Graph, clf: &ClcClassifier, blocks: &[ClcBlock], weights: &LossWeights) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for block in blocks {
        let (n, m) = (block.scores.images(), block.scores.sentences());
        let fused = clf.fuse_node(g, &block.scores.stacked())?;
        let dist = g.scale(fused, -1.0)?;
        let values = g.value(dist).data().to_vec();
        let gt = &block.sentence_image;
        // Image anchors over the row-major `n × m` layout.
        let img = mine_hard_negatives(&values, n, m, |i, j| gt[j] == i, weights.margin, weights.top_n)?;
        let img_pairs: Vec<(usize, usize)> =
            img.iter().map(|t| (t.anchor * m + t.positive, t.anchor * m + t.negative)).collect();
        // Sentence anchors over the transposed layout.
        let transposed: Vec<f64> = (0..m * n).map(|k| values[(k % n) * m + k / n]).collect();
        let sent = mine_hard_negatives(&transposed, m, n, |j, i| gt[j] == i, weights.margin, weights.top_n)?;
        let sent_pairs: Vec<(usize, usize)> =
            sent.iter().map(|t| (t.positive * m + t.anchor, t.negative * m + t.anchor)).collect();
        for (pairs, w) in [(img_pairs, 1.0), (sent_pairs, weights.lambda1)] {
            if pairs.is_empty() {
                continue;
            }
            let dp = g.gather_elems(dist, pairs.iter().map(|p| p.0).collect())?;
            let dn = g.gather_elems(dist, pairs.iter().map(|p| p.1).collect())?;
            let diff = g.sub(dp, dn)?;
            let shifted = g.add_scalar(diff, weights.margin)?;
            let hinge = g.relu(shifted)?;
            let sum = g.sum(hinge)?;
            let term = g.scale(sum, w)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    })
}

/// Full-batch training on validation score vectors: exactly `iterations`
/// Adam updates of the classifier. The retrieval model is not touched.
pub fn train_clc(
    clf: &mut ClcClassifier,
    blocks: &[ClcBlock],
    iterations: usize,
    weights: &LossWeights,
    adam: AdamConfig,
) -> Result<ClcTrainReport> {
    if blocks.is_empty() || blocks.iter().any(|b| b.sentence_image.is_empty()) {
        return Err(ClcError::EmptyValidation);
    }
    for b in blocks {
        if b.scores.languages.len() != clf.languages {
            return Err(ClcError::Dimension {
                expected: clf.languages,
                got: b.scores.languages.len(),
            });
        }
    }
    let mut opt = Adam::new(adam);
    let mut losses = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut g = Graph::new();
        let loss = clc_loss(&mut g, clf, blocks, weights)?;
        losses.push(g.value(loss).item());
        let grads = g.backward(loss)?;
        opt.step(&mut clf.store, &grads)?;
    }
    let mut g = Graph::new();
    let loss = clc_loss(&mut g, clf, blocks, weights)?;
    let final_loss = g.value(loss).item();
    Ok(ClcTrainReport {
        iterations,
        initial_loss: losses.first().copied().unwrap_or(final_loss),
        final_loss,
        losses,
    })
}

/// Default optimizer for CLC-C training.
pub fn clc_adam() -> AdamConfig {
    AdamConfig {
        learning_rate: 1e-2,
        ..AdamConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_examples() {
        assert!((clc_average(&[0.2, 0.4, 0.9]) - 0.5).abs() < 1e-15);
        assert_eq!(clc_average(&[0.7; 5]), 0.7);
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(ClcClassifier::new(10, false, 0).parameter_count(), 352);
        assert_eq!(ClcClassifier::new(3, false, 0).parameter_count(), 128);
        assert_eq!(ClcClassifier::new(10, true, 0).parameter_count(), 385);
        for l in 1..20 {
            assert_eq!(ClcClassifier::new(l, false, 1).parameter_count(), (l + 1) * 32);
        }
    }

    #[test]
    fn zero_weights_fuse_to_zero() {
        let clf = ClcClassifier::from_weights(Tensor::zeros(&[4, 32]), Tensor::zeros(&[32])).unwrap();
        assert_eq!(clf.fuse(&[0.3, -0.2, 0.9, 0.1]).unwrap(), 0.0);
        assert!(clf.fuse(&[0.3]).is_err());
    }

    #[test]
    fn identity_mean_classifier_reproduces_average() {
        // One hidden unit computes the mean (+1 bias keeps it positive under
        // relu for scores in [-1, 1]); the rest stay at zero.
        let l = 3;
        let mut w1 = vec![0.0; l * 32];
        for row in 0..l {
            w1[row * 32] = 1.0 / l as f64;
        }
        let mut b1 = vec![0.0; 32];
        b1[0] = 1.0;
        let clf = ClcClassifier::from_weights(Tensor::new(vec![l, 32], w1).unwrap(), Tensor::vector(b1)).unwrap();
        for v in [[0.2, -0.5, 0.9], [-1.0, -1.0, 0.5], [0.0, 0.3, 0.3]] {
            assert!((clf.fuse(&v).unwrap() - (clc_average(&v) + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_round_trip() {
        let clf = ClcClassifier::new(4, true, 9);
        let dir = tempfile::tempdir().unwrap();
        clf.save(&dir.path().join("clc.tsv")).unwrap();
        let back = ClcClassifier::load(&dir.path().join("clc.tsv")).unwrap();
        assert_eq!(back, clf);
    }
}
