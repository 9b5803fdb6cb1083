use polyembed_core::corpus::{generate_synthetic, BatchItem, Corpus, LanguageId, SyntheticConfig, SyntheticData};
use polyembed_core::model::{batch_loss, initialize, score, train, ModelConfig, RetrievalModel, TrainInputs, VocabChoice};
use polyembed_core::rng::stream;
use polyembed_core::tensor::{Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn tiny_data(seed: u64) -> SyntheticData {
    generate_synthetic(&SyntheticConfig {
        num_images: 20,
        num_languages: 3,
        concepts: 8,
        vocab_per_lang: 24,
        sentence_len: (4, 6),
        concepts_per_image: (1, 3),
        pretrained_dim: 8,
        feature_dim: 10,
        split_fractions: (0.6, 0.2),
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_config(seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig {
        joint_dim: 5,
        image_hidden: 16,
        epochs: 2,
        batch_size: 4,
        seed,
        ..Default::default()
    };
    cfg.pretrain.hem.k = 4;
    cfg.pretrain.hem.universal_dim = 4;
    cfg.pretrain.hem.reduced_dim = 3;
    cfg.pretrain.hem.latent_size = 12;
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch_size = 4;
    cfg.pretrain.seed = seed;
    cfg
}

fn inputs(data: &SyntheticData) -> TrainInputs<'_> {
    TrainInputs {
        corpus: &data.corpus,
        vectors: &data.vectors,
        pretrained: None,
        dictionary: None,
    }
}

/// Items pairing two captions of each of the first `n` training images.
fn items(corpus: &Corpus, n: usize, cross_language: bool) -> Vec<BatchItem> {
    corpus.splits.train[..n]
        .iter()
        .map(|&image| {
            let caps: Vec<usize> = (0..corpus.sentences.len()).filter(|&s| corpus.sentences[s].image_id == image).collect();
            let first = caps[0];
            let second = caps[1..]
                .iter()
                .copied()
                .find(|&s| (corpus.sentences[s].lang != corpus.sentences[first].lang) == cross_language)
                .expect("caption pair");
            BatchItem { image, first, second }
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn value(store: &ParamStore, name: &str) -> Tensor {
    store.get(store.id_of(name).unwrap()).clone()
}

#[test]
fn two_step_recurrence_matches_hand_unrolled_cell() {
    let data = tiny_data(1);
    let (model, store, corpus) = initialize(&inputs(&data), &tiny_config(1)).unwrap();
    let s = &corpus.sentences[0];
    let tokens = &s.tokens[..2];
    let mut g = Graph::new();
    let (nodes, rows) = model.sentence_nodes(&mut g, &store, &[(s.lang, tokens)]).unwrap();
    let table = g.value(rows.table).clone();
    let (wx, wh, b) = (value(&store, "txt.gru.wx"), value(&store, "txt.gru.wh"), value(&store, "txt.gru.b"));
    let (fw, fb) = (value(&store, "txt.fc.w"), value(&store, "txt.fc.b"));
    let hid = model.config.joint_dim;
    let mut h = vec![0.0; hid];
    for &r in &rows.index[0] {
        let x = table.row(r);
        let pre = |block: usize, k: usize, from_x: bool, from_h: bool| {
            let col = block * hid + k;
            let ax: f64 = if from_x { x.iter().enumerate().map(|(i, v)| v * wx.get(i, col)).sum() } else { 0.0 };
            let ah: f64 = if from_h { h.iter().enumerate().map(|(i, v)| v * wh.get(i, col)).sum() } else { 0.0 };
            (ax, ah)
        };
        let mut next = vec![0.0; hid];
        for k in 0..hid {
            let (rx, rh) = pre(0, k, true, true);
            let (zx, zh) = pre(1, k, true, true);
            let (nx, nh) = pre(2, k, true, true);
            let reset = sigmoid(rx + rh + b.data()[k]);
            let update = sigmoid(zx + zh + b.data()[hid + k]);
            let cand = (nx + reset * nh + b.data()[2 * hid + k]).tanh();
            next[k] = (1.0 - update) * cand + update * h[k];
        }
        h = next;
    }
    let out: Vec<f64> = (0..hid)
        .map(|j| fb.data()[j] + h.iter().enumerate().map(|(i, v)| v * fw.get(i, j)).sum::<f64>())
        .collect();
    for (a, e) in g.value(nodes.joint_raw).data().iter().zip(&out) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn masked_universal_rep_averages_surviving_tokens() {
    let data = tiny_data(2);
    let (model, store, corpus) = initialize(&inputs(&data), &tiny_config(2)).unwrap();
    let s = &corpus.sentences[3];
    let mut g = Graph::new();
    let (_, rows) = model.sentence_nodes(&mut g, &store, &[(s.lang, &s.tokens)]).unwrap();
    let masked = model.masked_nodes(&mut g, &store, &rows, &[vec![1]]).unwrap();
    let table = g.value(rows.table).clone();
    let kept: Vec<usize> = rows.index[0].iter().enumerate().filter(|&(t, _)| t != 1).map(|(_, &r)| r).collect();
    for (j, v) in g.value(masked.universal).data().iter().enumerate() {
        let mean = kept.iter().map(|&r| table.get(r, j)).sum::<f64>() / kept.len() as f64;
        assert!((v - mean).abs() < 1e-12);
    }
}

#[test]
fn empty_mask_reproduces_the_unmasked_reps() {
    let data = tiny_data(3);
    let (model, store, corpus) = initialize(&inputs(&data), &tiny_config(3)).unwrap();
    let batch: Vec<(usize, &[usize])> = corpus.sentences[..5].iter().map(|s| (s.lang, s.tokens.as_slice())).collect();
    let mut g = Graph::new();
    let (full, rows) = model.sentence_nodes(&mut g, &store, &batch).unwrap();
    let masked = model.masked_nodes(&mut g, &store, &rows, &vec![Vec::new(); 5]).unwrap();
    assert_eq!(g.value(full.universal), g.value(masked.universal));
    assert_eq!(g.value(full.joint), g.value(masked.joint));
}

#[test]
fn embeddings_are_unit_norm() {
    let data = tiny_data(4);
    let (model, store, corpus) = initialize(&inputs(&data), &tiny_config(4)).unwrap();
    let feats: Vec<&[f64]> = corpus.images.iter().map(|i| i.feature.as_slice()).collect();
    let sents: Vec<(usize, &[usize])> = corpus.sentences.iter().map(|s| (s.lang, s.tokens.as_slice())).collect();
    for t in [model.embed_images(&store, &feats).unwrap(), model.embed_sentences(&store, &sents).unwrap()] {
        for r in 0..t.rows() {
            let n: f64 = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_sentence_is_rejected() {
    let data = tiny_data(5);
    let (model, store, _) = initialize(&inputs(&data), &tiny_config(5)).unwrap();
    let mut g = Graph::new();
    assert!(model.sentence_nodes(&mut g, &store, &[(0, &[])]).is_err());
}

#[test]
fn loss_terms_are_finite_and_non_negative() {
    let data = tiny_data(6);
    let (model, store, corpus) = initialize(&inputs(&data), &tiny_config(6)).unwrap();
    let mut g = Graph::new();
    let terms = batch_loss(&mut g, &model, &store, &corpus, &items(&corpus, 4, true), &mut stream(0, 0)).unwrap();
    let b = terms.breakdown(&g, &model.config.weights);
    for v in [b.multimodal, b.mask, b.adversarial, b.neighborhood, b.total] {
        assert!(v.is_finite() && v >= 0.0, "{b:?}");
    }
    assert!(b.mask > 0.0);
}

#[test]
fn mask_term_vanishes_without_cross_language_pairs_or_when_disabled() {
    let data = tiny_data(7);
    let (model, store, corpus) = initialize(&inputs(&data), &tiny_config(7)).unwrap();
    let same: Vec<BatchItem> = items(&corpus, 4, true)
        .into_iter()
        .map(|it| BatchItem { second: it.first, ..it })
        .collect();
    let mut g = Graph::new();
    let terms = batch_loss(&mut g, &model, &store, &corpus, &same, &mut stream(0, 0)).unwrap();
    assert_eq!(g.value(terms.mask).item(), 0.0);

    let mut off = model.clone();
    off.config.mclm = false;
    let mut g = Graph::new();
    let terms = batch_loss(&mut g, &off, &store, &corpus, &items(&corpus, 4, true), &mut stream(0, 0)).unwrap();
    assert_eq!(g.value(terms.mask).item(), 0.0);
}

#[test]
fn training_is_deterministic() {
    let data = tiny_data(8);
    let a = train(inputs(&data), &tiny_config(8)).unwrap();
    let b = train(inputs(&data), &tiny_config(8)).unwrap();
    assert_eq!(a.store.checksum(), b.store.checksum());
    assert_eq!(a.log, b.log);
    assert_eq!(a.validation, b.validation);
    assert_eq!(a.validation.len(), 2);
    assert_eq!(a.log.len(), 2 * 3);
}

#[test]
fn best_epoch_parameters_are_kept() {
    let data = tiny_data(9);
    let mut cfg = tiny_config(9);
    cfg.epochs = 4;
    let out = train(inputs(&data), &cfg).unwrap();
    let best = out
        .validation
        .iter()
        .fold(None::<(usize, f64)>, |acc, r| match acc {
            Some((_, v)) if v >= r.val_mean_recall => acc,
            _ => Some((r.epoch, r.val_mean_recall)),
        })
        .unwrap();
    assert_eq!(out.model.best_epoch, best.0);
    let val = polyembed_core::eval::evaluate_direct(&out.model, &out.store, &data.corpus, polyembed_core::corpus::Split::Val)
        .unwrap();
    assert!((val.a - best.1).abs() < 1e-12);
}

#[test]
fn model_directory_round_trips() {
    let data = tiny_data(10);
    let out = train(inputs(&data), &tiny_config(10)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.model.save(&out.store, dir.path()).unwrap();
    out.write_logs(dir.path()).unwrap();
    let (model, store) = RetrievalModel::load(dir.path()).unwrap();
    assert_eq!(model, out.model);
    assert_eq!(store.checksum(), out.store.checksum());
    assert!(dir.path().join("train_log.csv").exists());
    let lines = std::fs::read_to_string(dir.path().join("val_log.csv")).unwrap().lines().count();
    assert_eq!(lines, 1 + 2);
}

#[test]
fn pivot_only_training_keeps_one_language() {
    let data = tiny_data(11);
    let mut cfg = tiny_config(11);
    let pivot = data.corpus.languages[0].clone();
    cfg.languages = Some(vec![pivot.clone()]);
    let out = train(inputs(&data), &cfg).unwrap();
    assert_eq!(out.model.languages, vec![pivot]);
    cfg.languages = Some(vec![LanguageId::new("zz")]);
    assert!(train(inputs(&data), &cfg).is_err());
}

#[test]
fn baseline_vocabularies_train_and_shrink() {
    let data = tiny_data(12);
    let mut counts = Vec::new();
    let pivot = data.corpus.languages[0].clone();
    for vocab in [
        VocabChoice::Frequency { threshold: 1 },
        VocabChoice::Frequency { threshold: 3 },
        VocabChoice::Pca { dim: 4 },
        VocabChoice::Dictionary { threshold: 3, pivot },
    ] {
        let cfg = ModelConfig {
            vocab,
            epochs: 1,
            ..tiny_config(12)
        };
        let out = train(inputs(&data), &cfg).unwrap_or_else(|e| panic!("{:?}: {e}", cfg.vocab));
        counts.push(out.model.parameter_count(&out.store).unwrap());
    }
    assert!(counts[1] < counts[0], "{counts:?}");
    assert!(counts[2] < counts[0], "{counts:?}");
    assert!(counts[3] < counts[0], "{counts:?}");
}

#[test]
fn config_hash_is_stable_and_sensitive() {
    let a = polyembed_core::digest::canonical_hash(&tiny_config(1));
    assert_eq!(a, polyembed_core::digest::canonical_hash(&tiny_config(1)));
    assert_ne!(a, polyembed_core::digest::canonical_hash(&tiny_config(2)));
}

proptest! {
    #[test]
    fn score_is_one_minus_cosine_distance(a in prop::collection::vec(-1.0f64..1.0, 6), b in prop::collection::vec(-1.0f64..1.0, 6)) {
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(na > 1e-3 && nb > 1e-3);
        let ua: Vec<f64> = a.iter().map(|v| v / na).collect();
        let ub: Vec<f64> = b.iter().map(|v| v / nb).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(ua.clone()));
        let y = g.constant(Tensor::vector(ub.clone()));
        let d = g.cosine_distance(x, y).unwrap();
        prop_assert!((score(&ua, &ub) - (1.0 - g.value(d).item())).abs() < 1e-12);
    }
}
