//! Bidirectional retrieval metrics and the evaluation modes: direct,
//! translate-to-pivot, and cross-lingual consistency fusion.

mod metrics;

pub use metrics::{
    aggregate, chance_mean_recall, chance_recall, mean_recall, recall_at_k, recalls, round1, Direction,
    LanguageMetrics, MetricsReport, ScoreMatrix, RECALL_KS,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clc::{build_score_vectors, clc_average, ClcBlock, ClcClassifier, ClcError, LanguageScores};
use crate::corpus::{Corpus, CorpusError, LanguageId, Sentence, Split, Translator};
use crate::model::{score_matrix, ModelError, RetrievalModel};
use crate::rng::{purpose, stream};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Clc(#[from] ClcError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum EvalMode {
    /// Each query scored in its own language.
    Direct,
    /// Non-pivot queries are machine-translated into `pivot` first.
    TransPivot { pivot: LanguageId },
    /// Mean of the scores through every model language.
    ClcAverage,
    /// Learned fusion of the per-language scores.
    ClcClassifier,
}

/// The image rows and, per corpus language, the sentences of one split.
pub struct SplitView<'a> {
    pub images: Vec<usize>,
    /// `[lang]` -> (sentences, each sentence's image row).
    pub queries: Vec<(Vec<&'a Sentence>, Vec<usize>)>,
}

impl<'a> SplitView<'a> {
    pub fn new(corpus: &'a Corpus, split: Split) -> Result<Self> {
        let images = corpus.splits.get(split).to_vec();
        if images.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut row_of = vec![None; corpus.images.len()];
        for (r, &i) in images.iter().enumerate() {
            row_of[i] = Some(r);
        }
        let mut queries = vec![(Vec::new(), Vec::new()); corpus.num_languages()];
        for s in &corpus.sentences {
            if let Some(r) = row_of[s.image_id] {
                queries[s.lang].0.push(s);
                queries[s.lang].1.push(r);
            }
        }
        Ok(Self { images, queries })
    }

    pub fn embed_images(&self, model: &RetrievalModel, store: &ParamStore, corpus: &Corpus) -> Result<Tensor> {
        let features: Vec<&[f64]> = self.images.iter().map(|&i| corpus.images[i].feature.as_slice()).collect();
        Ok(model.embed_images(store, &features)?)
    }
}

fn embed(model: &RetrievalModel, store: &ParamStore, lang: usize, tokens: &[Vec<usize>]) -> Result<Tensor> {
    let batch: Vec<(usize, &[usize])> = tokens.iter().map(|t| (lang, t.as_slice())).collect();
    Ok(model.embed_sentences(store, &batch)?)
}

fn model_language(model: &RetrievalModel, code: &LanguageId) -> Result<usize> {
    model
        .language_index(code.as_str())
        .ok_or_else(|| EvalError::Model(ModelError::UnknownLanguage(code.to_string())))
}

/// Direct-mode report over the languages the model knows.
pub fn evaluate_direct(model: &RetrievalModel, store: &ParamStore, corpus: &Corpus, split: Split) -> Result<MetricsReport> {
    evaluate(model, store, corpus, split, &EvalMode::Direct, &EvalOptions::default())
}

/// Extras some modes need.
#[derive(Clone, Copy, Default)]
pub struct EvalOptions<'a> {
    pub translator: Option<&'a Translator>,
    pub classifier: Option<&'a ClcClassifier>,
    /// Seeds the simulated translations.
    pub seed: u64,
}

/// Per-language recalls and HA/A on `split`. Direct mode skips corpus
/// languages the model was not trained on; the other modes report every
/// corpus language with queries in the split.
pub fn evaluate(
    model: &RetrievalModel,
    store: &ParamStore,
    corpus: &Corpus,
    split: Split,
    mode: &EvalMode,
    opts: &EvalOptions<'_>,
) -> Result<MetricsReport> {
    let view = SplitView::new(corpus, split)?;
    let images = view.embed_images(model, store, corpus)?;
    let mut rng = stream(opts.seed, purpose::EVAL_TRANSLATE);
    let translator = || opts.translator.ok_or_else(|| EvalError::Config("this mode needs a translator".into()));
    let mut rows = Vec::new();
    for (c, (sentences, gt)) in view.queries.iter().enumerate() {
        if sentences.is_empty() {
            continue;
        }
        let code = &corpus.languages[c];
        let scores = match mode {
            EvalMode::Direct => {
                let Some(m) = model.language_index(code.as_str()) else {
                    continue;
                };
                let tokens: Vec<Vec<usize>> = sentences.iter().map(|s| s.tokens.clone()).collect();
                score_matrix(&images, &embed(model, store, m, &tokens)?)
            }
            EvalMode::TransPivot { pivot } => {
                let m = model_language(model, pivot)?;
                let p = corpus
                    .language_index(pivot.as_str())
                    .ok_or_else(|| EvalError::Corpus(CorpusError::UnknownLanguage(pivot.to_string())))?;
                let tokens: Vec<Vec<usize>> = if c == p {
                    sentences.iter().map(|s| s.tokens.clone()).collect()
                } else {
                    let t = translator()?;
                    sentences
                        .iter()
                        .map(|s| Ok(t.translate(s, p, &mut rng)?.tokens))
                        .collect::<Result<_>>()?
                };
                score_matrix(&images, &embed(model, store, m, &tokens)?)
            }
            EvalMode::ClcAverage | EvalMode::ClcClassifier => {
                let vectors = clc_scores(model, store, &images, sentences, corpus, translator()?, &mut rng)?;
                match mode {
                    EvalMode::ClcAverage => vectors.fuse(clc_average),
                    _ => {
                        let clf = opts
                            .classifier
                            .ok_or_else(|| EvalError::Config("classifier mode needs trained weights".into()))?;
                        fuse_with(&vectors, clf)?
                    }
                }
            }
        };
        let matrix = ScoreMatrix::new(scores, gt.clone())?;
        rows.push(LanguageMetrics::from_matrix(code.clone(), &matrix)?);
    }
    if rows.is_empty() {
        return Err(EvalError::Empty);
    }
    let human: Vec<LanguageId> = corpus
        .human_languages(split)
        .into_iter()
        .map(|l| corpus.languages[l].clone())
        .collect();
    MetricsReport::new(rows, &human)
}

fn clc_scores(
    model: &RetrievalModel,
    store: &ParamStore,
    images: &Tensor,
    sentences: &[&Sentence],
    corpus: &Corpus,
    translator: &Translator,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<LanguageScores> {
    if translator.languages() != corpus.languages.as_slice() {
        return Err(EvalError::Config("translator and corpus languages differ".into()));
    }
    Ok(build_score_vectors(model, store, images, sentences, &corpus.languages, translator, rng)?)
}

fn fuse_with(vectors: &LanguageScores, clf: &ClcClassifier) -> Result<Tensor> {
    let (n, m) = (vectors.images(), vectors.sentences());
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            data.push(clf.fuse(&vectors.vector(i, j))?);
        }
    }
    Ok(Tensor::new(vec![n, m], data).expect("consistent shape"))
}

/// Score-vector blocks (one per language with queries) for CLC-C training.
pub fn clc_blocks(
    model: &RetrievalModel,
    store: &ParamStore,
    corpus: &Corpus,
    split: Split,
    translator: &Translator,
    seed: u64,
) -> Result<Vec<ClcBlock>> {
    let view = SplitView::new(corpus, split)?;
    let images = view.embed_images(model, store, corpus)?;
    let mut rng = stream(seed, purpose::EVAL_TRANSLATE);
    let mut blocks = Vec::new();
    for (sentences, gt) in &view.queries {
        if sentences.is_empty() {
            continue;
        }
        let scores = clc_scores(model, store, &images, sentences, corpus, translator, &mut rng)?;
        blocks.push(ClcBlock {
            scores,
            sentence_image: gt.clone(),
        });
    }
    Ok(blocks)
}
