use rand::Rng;

use super::{ModelError, Result, RetrievalModel};
use crate::hem::TokenRows;
use crate::losses::{glorot, LanguageClassifier};
use crate::tensor::{Graph, NodeId, ParamStore, Tensor};

pub(crate) const IMG_FC1: (&str, &str) = ("img.fc1.w", "img.fc1.b");
pub(crate) const IMG_FC2: (&str, &str) = ("img.fc2.w", "img.fc2.b");
pub(crate) const GRU: (&str, &str, &str) = ("txt.gru.wx", "txt.gru.wh", "txt.gru.b");
pub(crate) const TXT_FC: (&str, &str) = ("txt.fc.w", "txt.fc.b");
pub(crate) const MASK_TOKEN: &str = "txt.mask";
pub(crate) const MCLM_AVG: (&str, &str) = ("mclm.avg.w", "mclm.avg.b");
pub(crate) const MCLM_SEQ: (&str, &str) = ("mclm.seq.w", "mclm.seq.b");
pub(crate) const ADV_PREFIX: &str = "adv";

/// Sizes the network is built from.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims {
    pub feature: usize,
    pub image_hidden: usize,
    pub universal: usize,
    pub joint: usize,
    pub languages: usize,
}

fn add_affine(store: &mut ParamStore, (w, b): (&str, &str), rows: usize, cols: usize, rng: &mut impl Rng) {
    store.add(w, glorot(rng, rows, cols), true);
    store.add(b, Tensor::zeros(&[cols]), true);
}

/// Registers both branches, the MASK token, the two reconstruction
/// predictors and the language classifier.
pub(crate) fn register_network(store: &mut ParamStore, dims: Dims, rng: &mut impl Rng) -> LanguageClassifier {
    let Dims {
        feature,
        image_hidden,
        universal,
        joint,
        languages,
    } = dims;
    add_affine(store, IMG_FC1, feature, image_hidden, rng);
    add_affine(store, IMG_FC2, image_hidden, joint, rng);
    store.add(GRU.0, glorot(rng, universal, 3 * joint), true);
    store.add(GRU.1, glorot(rng, joint, 3 * joint), true);
    store.add(GRU.2, Tensor::zeros(&[3 * joint]), true);
    add_affine(store, TXT_FC, joint, joint, rng);
    store.add(MASK_TOKEN, glorot(rng, 1, universal), true);
    add_affine(store, MCLM_AVG, 2 * universal, 2 * universal, rng);
    add_affine(store, MCLM_SEQ, 2 * joint, 2 * joint, rng);
    LanguageClassifier::register(store, ADV_PREFIX, universal, languages, rng)
}

pub(crate) fn param(g: &mut Graph, store: &ParamStore, name: &str) -> Result<NodeId> {
    let id = store.id_of(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
    Ok(g.param(store, id))
}

pub(crate) fn classifier(store: &ParamStore) -> Result<LanguageClassifier> {
    let id = |s: &str| {
        let name = format!("{ADV_PREFIX}.{s}");
        store.id_of(&name).ok_or(ModelError::MissingParam(name))
    };
    Ok(LanguageClassifier {
        w1: id("w1")?,
        b1: id("b1")?,
        w2: id("w2")?,
        b2: id("b2")?,
    })
}

/// Graph nodes for one batch of sentences.
#[derive(Clone, Copy, Debug)]
pub struct SentenceNodes {
    /// Mean token embedding, `n × D_u`.
    pub universal: NodeId,
    /// Language-branch output before normalization, `n × D_j`.
    pub joint_raw: NodeId,
    /// Unit-norm joint embedding.
    pub joint: NodeId,
}

/// Masked counterparts of [`SentenceNodes`]: the universal rep averages only
/// surviving tokens; the sequence rep runs masked positions as the MASK token.
#[derive(Clone, Copy, Debug)]
pub struct MaskedNodes {
    pub universal: NodeId,
    pub joint_raw: NodeId,
    pub joint: NodeId,
}

impl RetrievalModel {
    /// Image branch: two affine layers with a relu between, then unit norm.
    pub fn image_nodes(&self, g: &mut Graph, store: &ParamStore, features: &[&[f64]]) -> Result<NodeId> {
        if let Some(f) = features.iter().find(|f| f.len() != self.feature_dim) {
            return Err(ModelError::Shape(format!(
                "image feature has {} dims, model expects {}",
                f.len(),
                self.feature_dim
            )));
        }
        let data: Vec<f64> = features.iter().flat_map(|f| f.iter().copied()).collect();
        let x = g.constant(Tensor::matrix(features.len(), self.feature_dim, data)?);
        let (w1, b1) = (param(g, store, IMG_FC1.0)?, param(g, store, IMG_FC1.1)?);
        let (w2, b2) = (param(g, store, IMG_FC2.0)?, param(g, store, IMG_FC2.1)?);
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h)?;
        let out = g.linear(h, w2, b2)?;
        Ok(g.l2_normalize(out)?)
    }

    /// Runs the recurrent cell left to right over each row list of `index`
    /// (rows of `table`), from a zero state, and projects the final state.
    pub(crate) fn sequence_head(&self, g: &mut Graph, store: &ParamStore, table: NodeId, index: &[Vec<usize>]) -> Result<NodeId> {
        if let Some(s) = index.iter().position(Vec::is_empty) {
            return Err(ModelError::EmptySentence(s));
        }
        let hidden = self.config.joint_dim;
        let (wx, wh, b) = (param(g, store, GRU.0)?, param(g, store, GRU.1)?, param(g, store, GRU.2)?);
        let mut h = g.constant(Tensor::zeros(&[index.len(), hidden]));
        let longest = index.iter().map(Vec::len).max().unwrap_or(0);
        for t in 0..longest {
            let rows: Vec<usize> = index.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
            let active: Vec<bool> = index.iter().map(|s| t < s.len()).collect();
            let x = g.gather_rows(table, rows)?;
            h = g.gru_step(x, h, wx, wh, b, active)?;
        }
        let (w, bias) = (param(g, store, TXT_FC.0)?, param(g, store, TXT_FC.1)?);
        Ok(g.linear(h, w, bias)?)
    }

    /// Universal and joint representations of `sentences` (model language
    /// indices), plus the token rows they were built from.
    pub fn sentence_nodes(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sentences: &[(usize, &[usize])],
    ) -> Result<(SentenceNodes, TokenRows)> {
        if let Some(s) = sentences.iter().position(|(_, t)| t.is_empty()) {
            return Err(ModelError::EmptySentence(s));
        }
        let rows = self.embedder.lookup(g, store, sentences)?;
        let universal = rows.mean(g, None)?;
        let joint_raw = self.sequence_head(g, store, rows.table, &rows.index)?;
        let joint = g.l2_normalize(joint_raw)?;
        Ok((
            SentenceNodes {
                universal,
                joint_raw,
                joint,
            },
            rows,
        ))
    }

    /// Masked reps given sorted masked positions per sentence.
    pub fn masked_nodes(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rows: &TokenRows,
        masked: &[Vec<usize>],
    ) -> Result<MaskedNodes> {
        let keep: Vec<Vec<bool>> = rows
            .index
            .iter()
            .zip(masked)
            .map(|(idx, m)| (0..idx.len()).map(|t| m.binary_search(&t).is_err()).collect())
            .collect();
        let universal = rows.mean(g, Some(&keep))?;
        let mask_row = g.value(rows.table).rows();
        let token = param(g, store, MASK_TOKEN)?;
        let table = g.concat_rows(&[rows.table, token])?;
        let index: Vec<Vec<usize>> = rows
            .index
            .iter()
            .zip(&keep)
            .map(|(idx, k)| idx.iter().zip(k).map(|(&r, &kept)| if kept { r } else { mask_row }).collect())
            .collect();
        let joint_raw = self.sequence_head(g, store, table, &index)?;
        let joint = g.l2_normalize(joint_raw)?;
        Ok(MaskedNodes {
            universal,
            joint_raw,
            joint,
        })
    }

    /// Unit-norm joint embeddings of image features, computed in chunks.
    pub fn embed_images(&self, store: &ParamStore, features: &[&[f64]]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(features.len());
        for chunk in features.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let out = self.image_nodes(&mut g, store, chunk)?;
            let v = g.value(out);
            rows.extend((0..v.rows()).map(|r| v.row(r).to_vec()));
        }
        to_matrix(rows, self.config.joint_dim)
    }

    /// Unit-norm joint embeddings of sentences, computed in chunks.
    pub fn embed_sentences(&self, store: &ParamStore, sentences: &[(usize, &[usize])]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let (nodes, _) = self.sentence_nodes(&mut g, store, chunk)?;
            let v = g.value(nodes.joint);
            rows.extend((0..v.rows()).map(|r| v.row(r).to_vec()));
        }
        to_matrix(rows, self.config.joint_dim)
    }
}

const EVAL_CHUNK: usize = 256;

fn to_matrix(rows: Vec<Vec<f64>>, cols: usize) -> Result<Tensor> {
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, cols]));
    }
    Ok(Tensor::from_rows(&rows)?)
}

/// Similarity of two unit vectors: their dot product (= 1 − cosine distance).
pub fn score(image: &[f64], query: &[f64]) -> f64 {
    image.iter().zip(query).map(|(a, b)| a * b).sum()
}

/// `images × sentences` similarity matrix from row-wise unit embeddings.
pub fn score_matrix(images: &Tensor, sentences: &Tensor) -> Tensor {
    let (n, m) = (images.rows(), sentences.rows());
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            data.push(score(images.row(i), sentences.row(j)));
        }
    }
    Tensor::new(vec![n, m], data).expect("consistent shape")
}
