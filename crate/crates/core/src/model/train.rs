use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{classifier, param, register_network, Dims, MCLM_AVG, MCLM_SEQ};
use super::{ModelConfig, ModelError, Result, RetrievalModel, VocabChoice};
use crate::corpus::{BatchItem, Corpus, MinibatchSampler, PretrainedVectors, Split};
use crate::digest::canonical_hash;
use crate::hem::{center_per_language, pretrain_latent, reduce_pretrained, Embedder, Pretrained, WordTableEmbedder};
use crate::losses::{
    adversarial_loss, choose_mask, mclm_loss, multimodal_loss, neighborhood_loss, LossBreakdown, LossTerms,
};
use crate::rng::{purpose, stream};
use crate::tensor::{Adam, Graph, NodeId, ParamStore, Tensor};
use crate::vocab::{count_frequencies, dictionary_map, frequency_threshold, Dictionary};

/// Data a training run reads. `pretrained` supplies a hybrid embedder with a
/// frozen assignment (otherwise one is pretrained here); `dictionary`
/// overrides the lexicon-derived dictionary for the dictionary baseline.
pub struct TrainInputs<'a> {
    pub corpus: &'a Corpus,
    pub vectors: &'a PretrainedVectors,
    pub pretrained: Option<&'a Pretrained>,
    pub dictionary: Option<&'a Dictionary>,
}

/// One optimizer step. Gradient norms are of the weighted terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
    pub grad_norms: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Average mR over validation languages.
    pub val_mean_recall: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: RetrievalModel,
    /// Parameters from the best validation epoch.
    pub store: ParamStore,
    pub log: Vec<StepRecord>,
    pub validation: Vec<EpochRecord>,
}

impl TrainedModel {
    /// Writes `train_log.csv` and `val_log.csv` into `dir`.
    pub fn write_logs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("train_log.csv"))?);
        writeln!(w, "epoch,step,mm,mask,adv,nc,total,grad_mm,grad_mask,grad_adv,grad_nc")?;
        for r in &self.log {
            let l = &r.loss;
            write!(w, "{},{},{},{},{},{},{}", r.epoch, r.step, l.multimodal, l.mask, l.adversarial, l.neighborhood, l.total)?;
            for g in r.grad_norms {
                write!(w, ",{g}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("val_log.csv"))?);
        writeln!(w, "epoch,mean_loss,val_mR")?;
        for r in &self.validation {
            writeln!(w, "{},{},{}", r.epoch, r.mean_loss, r.val_mean_recall)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn restrict<'a>(inputs: &TrainInputs<'a>, cfg: &ModelConfig) -> Result<(Corpus, PretrainedVectors)> {
    match &cfg.languages {
        None => Ok((inputs.corpus.clone(), inputs.vectors.clone())),
        Some(codes) => Ok((inputs.corpus.restrict_languages(codes)?, inputs.vectors.restrict(codes)?)),
    }
}

fn centered_tables(vectors: &PretrainedVectors) -> Result<Vec<Tensor>> {
    center_per_language(vectors)
        .into_iter()
        .map(|t| {
            if t.is_empty() {
                Ok(Tensor::zeros(&[0, vectors.dim()]))
            } else {
                Ok(Tensor::from_rows(&t)?)
            }
        })
        .collect()
}

/// Builds the token embedder for `cfg.vocab` and returns it with a store
/// holding its parameters.
fn build_embedder(
    corpus: &Corpus,
    vectors: &PretrainedVectors,
    inputs: &TrainInputs<'_>,
    cfg: &ModelConfig,
) -> Result<(Embedder, ParamStore)> {
    let universal = cfg.hem().universal_dim;
    let mut rng = stream(cfg.seed, purpose::INIT);
    let mut store = ParamStore::new();
    let table = |store: &mut ParamStore, inputs: &[Tensor], mapping, rng: &mut _| -> Result<Embedder> {
        Ok(Embedder::Table(WordTableEmbedder::register(
            store,
            corpus.languages.clone(),
            inputs,
            mapping,
            universal,
            rng,
        )?))
    };
    let embedder = match &cfg.vocab {
        VocabChoice::Hybrid => {
            let pretrained = match inputs.pretrained {
                Some(p) => p.clone(),
                None => pretrain_latent(corpus, vectors, &cfg.pretrain)?,
            };
            if pretrained.embedder.languages != corpus.languages {
                return Err(ModelError::Config(
                    "pretrained embedder covers different languages than the training corpus".into(),
                ));
            }
            if !pretrained.embedder.assignment.frozen {
                return Err(ModelError::Config("pretrained assignment is not frozen".into()));
            }
            store = pretrained.store;
            Embedder::Hybrid(pretrained.embedder)
        }
        VocabChoice::Frequency { threshold } => {
            let mapping = frequency_threshold(&count_frequencies(corpus)?, *threshold)?;
            table(&mut store, &centered_tables(vectors)?, mapping, &mut rng)?
        }
        VocabChoice::Pca { dim } => {
            if *dim > vectors.dim() {
                return Err(ModelError::Config(format!("PCA dim {dim} exceeds vector dim {}", vectors.dim())));
            }
            let (reduced, _) = reduce_pretrained(vectors, *dim)?;
            let mapping = frequency_threshold(&count_frequencies(corpus)?, 1)?;
            table(&mut store, &reduced, mapping, &mut rng)?
        }
        VocabChoice::Dictionary { threshold, pivot } => {
            let p = corpus
                .language_index(pivot.as_str())
                .ok_or_else(|| ModelError::UnknownLanguage(pivot.to_string()))?;
            let dictionary = match inputs.dictionary {
                Some(_) if cfg.languages.is_some() => {
                    return Err(ModelError::Config("an explicit dictionary cannot be combined with a language subset".into()));
                }
                Some(d) => d.clone(),
                None => {
                    let lexicon = corpus.lexicon.as_ref().ok_or(crate::corpus::CorpusError::NoLexicon)?;
                    Dictionary::from_lexicon(lexicon, p)?
                }
            };
            if dictionary.pivot != p {
                return Err(ModelError::Config("dictionary pivot disagrees with the config".into()));
            }
            let mapping = dictionary_map(&count_frequencies(corpus)?, *threshold, &dictionary)?;
            table(&mut store, &centered_tables(vectors)?, mapping, &mut rng)?
        }
    };
    Ok((embedder, store))
}

/// Sorted masked positions for every sentence.
fn draw_masks(sentences: &[(usize, &[usize])], ratio: f64, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    sentences
        .iter()
        .map(|(_, t)| if t.len() < 2 { Ok(Vec::new()) } else { Ok(choose_mask(t.len(), ratio, rng)?) })
        .collect()
}

fn zero(g: &mut Graph) -> NodeId {
    g.constant(Tensor::scalar(0.0))
}

/// Builds every loss term for one batch. Sentences are laid out as all
/// first captions, then all second captions; both describe the item's image.
pub fn batch_loss(
    g: &mut Graph,
    model: &RetrievalModel,
    store: &ParamStore,
    corpus: &Corpus,
    items: &[BatchItem],
    rng: &mut impl Rng,
) -> Result<LossTerms> {
    let cfg = &model.config;
    let w = &cfg.weights;
    let b = items.len();
    let sents: Vec<_> = items
        .iter()
        .map(|it| &corpus.sentences[it.first])
        .chain(items.iter().map(|it| &corpus.sentences[it.second]))
        .collect();
    let sentences: Vec<(usize, &[usize])> = sents.iter().map(|s| (s.lang, s.tokens.as_slice())).collect();
    let features: Vec<&[f64]> = items.iter().map(|it| corpus.images[it.image].feature.as_slice()).collect();
    let sentence_item: Vec<usize> = (0..b).chain(0..b).collect();
    let firsts: Vec<usize> = (0..b).collect();
    let seconds: Vec<usize> = (b..2 * b).collect();

    let images = model.image_nodes(g, store, &features)?;
    let (nodes, rows) = model.sentence_nodes(g, store, &sentences)?;
    let mut multimodal = multimodal_loss(g, images, nodes.joint, &sentence_item, w)?;

    let mask = if cfg.mclm {
        let masks = draw_masks(&sentences, w.mask_ratio, rng)?;
        let masked = model.masked_nodes(g, store, &rows, &masks)?;
        let masked_mm = multimodal_loss(g, images, masked.joint, &sentence_item, w)?;
        multimodal = g.add(multimodal, masked_mm)?;
        let cross: Vec<usize> = (0..b).filter(|&i| sents[i].lang != sents[b + i].lang).collect();
        if cross.is_empty() {
            zero(g)
        } else {
            let second: Vec<usize> = cross.iter().map(|i| b + i).collect();
            let mut total = None;
            for (full, part, names) in [
                (nodes.universal, masked.universal, MCLM_AVG),
                (nodes.joint_raw, masked.joint_raw, MCLM_SEQ),
            ] {
                let fi = g.gather_rows(full, cross.clone())?;
                let mi = g.gather_rows(part, cross.clone())?;
                let fj = g.gather_rows(full, second.clone())?;
                let mj = g.gather_rows(part, second.clone())?;
                let (wn, bn) = (param(g, store, names.0)?, param(g, store, names.1)?);
                let term = mclm_loss(g, fi, mi, fj, mj, wn, bn)?;
                total = Some(match total {
                    Some(t) => g.add(t, term)?,
                    None => term,
                });
            }
            total.expect("two reconstruction terms")
        }
    } else {
        zero(g)
    };

    let labels: Vec<usize> = sents.iter().map(|s| s.lang).collect();
    let adversarial = adversarial_loss(g, store, nodes.universal, labels, &classifier(store)?)?;

    let u1 = g.gather_rows(nodes.universal, firsts.clone())?;
    let u2 = g.gather_rows(nodes.universal, seconds.clone())?;
    let q1 = g.gather_rows(nodes.joint, firsts)?;
    let q2 = g.gather_rows(nodes.joint, seconds)?;
    let nc_u = neighborhood_loss(g, u1, u2, w)?;
    let nc_q = neighborhood_loss(g, q1, q2, w)?;
    let neighborhood = g.add(nc_u, nc_q)?;

    Ok(LossTerms {
        multimodal,
        mask,
        adversarial,
        neighborhood,
    })
}

/// Builds an untrained model: restricts the data to `cfg.languages`, sets up
/// the embedder (pretraining the latent vocabulary if needed) and registers
/// the network. Returns the (possibly restricted) corpus it was built for.
pub fn initialize(inputs: &TrainInputs<'_>, cfg: &ModelConfig) -> Result<(RetrievalModel, ParamStore, Corpus)> {
    cfg.check()?;
    let (corpus, vectors) = restrict(inputs, cfg)?;
    corpus.validate()?;
    vectors.check_against(&corpus)?;
    let (embedder, mut store) = build_embedder(&corpus, &vectors, inputs, cfg)?;
    let dims = Dims {
        feature: corpus.feature_dim,
        image_hidden: cfg.image_hidden,
        universal: embedder.universal_dim(),
        joint: cfg.joint_dim,
        languages: corpus.num_languages(),
    };
    register_network(&mut store, dims, &mut stream(cfg.seed, purpose::NETWORK_INIT));
    let model = RetrievalModel {
        config: cfg.clone(),
        config_hash: canonical_hash(cfg),
        languages: corpus.languages.clone(),
        feature_dim: corpus.feature_dim,
        embedder,
        best_epoch: 0,
    };
    Ok((model, store, corpus))
}

/// Trains the retrieval model on the corpus's training split, tracking
/// validation mR every epoch and keeping the best epoch's parameters.
pub fn train(inputs: TrainInputs<'_>, cfg: &ModelConfig) -> Result<TrainedModel> {
    let (mut model, mut store, corpus) = initialize(&inputs, cfg)?;
    let mut sampler = MinibatchSampler::new(&corpus, Split::Train, cfg.batch_size, cfg.seed)?;
    let mut mask_rng = stream(cfg.seed, purpose::MASK);
    let mut adam = Adam::new(cfg.adam);
    let w = &cfg.weights;
    let scales = [1.0, w.lambda_mask, w.lambda_adv, w.lambda_nc];
    let mut log = Vec::new();
    let mut validation = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        let steps = sampler.batches_per_epoch();
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let batch = sampler.next_batch();
            let mut g = Graph::new();
            let terms = batch_loss(&mut g, &model, &store, &corpus, &batch.items, &mut mask_rng)?;
            let loss = terms.breakdown(&g, w);
            if !loss.total.is_finite() {
                return Err(ModelError::NonFinite {
                    epoch,
                    step,
                    detail: format!("{loss:?}"),
                });
            }
            let mut total = crate::tensor::Gradients::default();
            let mut grad_norms = [0.0; 4];
            for (k, (node, scale)) in [terms.multimodal, terms.mask, terms.adversarial, terms.neighborhood]
                .into_iter()
                .zip(scales)
                .enumerate()
            {
                if scale == 0.0 {
                    continue;
                }
                let grads = g.backward(node)?;
                grad_norms[k] = scale * grads.norm();
                total.add_scaled(&grads, scale);
            }
            if !total.norm().is_finite() {
                return Err(ModelError::NonFinite {
                    epoch,
                    step,
                    detail: "gradient".into(),
                });
            }
            adam.step(&mut store, &total)?;
            epoch_loss += loss.total;
            log.push(StepRecord {
                epoch,
                step,
                loss,
                grad_norms,
            });
        }
        let val = crate::eval::evaluate_direct(&model, &store, &corpus, Split::Val)
            .map_err(|e| ModelError::Validation(e.to_string()))?
            .a;
        let mean_loss = epoch_loss / steps.max(1) as f64;
        log::info!("epoch {epoch}: loss {mean_loss:.4}, val mR {val:.2}");
        validation.push(EpochRecord {
            epoch,
            mean_loss,
            val_mean_recall: val,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val > *b) {
            best = Some((val, epoch, store.clone()));
        }
    }
    let (_, best_epoch, best_store) = best.expect("at least one epoch");
    model.best_epoch = best_epoch;
    Ok(TrainedModel {
        model,
        store: best_store,
        log,
        validation,
    })
}
