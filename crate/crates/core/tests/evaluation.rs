use polyembed_core::clc::ClcClassifier;
use polyembed_core::corpus::{generate_synthetic, LanguageId, Split, SyntheticConfig, SyntheticData, Translator};
use polyembed_core::eval::{
    aggregate, chance_recall, evaluate, mean_recall, recall_at_k, recalls, round1, Direction, EvalMode, EvalOptions,
    LanguageMetrics, MetricsReport, ScoreMatrix,
};
use polyembed_core::model::{train, ModelConfig, TrainInputs, TrainedModel};
use polyembed_core::rng::stream;
use polyembed_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn lang(code: &str) -> LanguageId {
    LanguageId::new(code)
}

#[test]
fn six_recalls_average_to_the_printed_mean() {
    // Per-direction recalls of the full model's English row on the
    // ten-language benchmark; printed mR 79.3.
    let r = [62.9, 89.2, 95.8, 51.1, 84.0, 92.5];
    assert_eq!(round1(mean_recall(&r)), 79.3);
}

#[test]
fn human_and_all_language_averages_match_the_printed_table() {
    let codes = ["en", "de", "fr", "cs", "cn", "ja", "ar", "af", "ko", "ru"];
    let mrs = [79.3, 78.4, 77.8, 78.6, 76.7, 77.2, 77.9, 78.2, 75.1, 78.0];
    let per: Vec<(LanguageId, f64)> = codes.iter().zip(mrs).map(|(c, v)| (lang(c), v)).collect();
    let human = [lang("en"), lang("cn"), lang("ja")];
    let (ha, a) = aggregate(&per, &human).unwrap();
    assert_eq!(round1(ha), 77.7);
    assert_eq!(round1(a), 77.7);
}

/// Position of the ground truth in a full sort by descending score, ties
/// by ascending index.
fn sorted_rank(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.iter().position(|&c| c == target).unwrap()
}

fn oracle_recall(m: &ScoreMatrix, k: usize, dir: Direction) -> f64 {
    let (n, q) = (m.images(), m.sentences());
    let s = m.scores();
    let gt = m.sentence_image();
    let hits: Vec<bool> = match dir {
        Direction::SentenceToImage => (0..q)
            .map(|j| sorted_rank(&(0..n).map(|i| s.get(i, j)).collect::<Vec<_>>(), gt[j]) < k)
            .collect(),
        Direction::ImageToSentence => (0..n)
            .filter(|&i| gt.contains(&i))
            .map(|i| {
                let row = s.row(i);
                (0..q).filter(|&j| gt[j] == i).any(|j| sorted_rank(row, j) < k)
            })
            .collect(),
    };
    100.0 * hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

fn random_matrix(rng: &mut impl Rng, n: usize, q: usize, levels: u32) -> ScoreMatrix {
    // Coarse levels force plenty of ties.
    let data = (0..n * q).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
    let gt = (0..q).map(|_| rng.gen_range(0..n)).collect();
    ScoreMatrix::new(Tensor::new(vec![n, q], data).unwrap(), gt).unwrap()
}

proptest! {
    #[test]
    fn recall_matches_full_sort(seed in 0u64..10_000, n in 1usize..30, q in 1usize..40, levels in 2u32..50) {
        let m = random_matrix(&mut stream(seed, 0), n, q, levels);
        for k in [1, 5, 10] {
            for dir in [Direction::ImageToSentence, Direction::SentenceToImage] {
                prop_assert_eq!(recall_at_k(&m, k, dir).unwrap(), oracle_recall(&m, k, dir));
            }
        }
    }

    #[test]
    fn recalls_are_monotone_in_k(seed in 0u64..10_000) {
        let m = random_matrix(&mut stream(seed, 1), 12, 20, 1000);
        let r = recalls(&m).unwrap();
        prop_assert!(r[0] <= r[1] && r[1] <= r[2]);
        prop_assert!(r[3] <= r[4] && r[4] <= r[5]);
    }
}

#[test]
fn chance_recall_matches_subset_enumeration() {
    for n in 1..=10usize {
        for g in 1..=n {
            for k in 1..=n {
                let (mut hit, mut total) = (0u64, 0u64);
                for mask in 0u32..(1 << n) {
                    if mask.count_ones() as usize != k {
                        continue;
                    }
                    total += 1;
                    // Relevant items are the first `g` candidates.
                    hit += (mask & ((1 << g) - 1) != 0) as u64;
                }
                let exact = hit as f64 / total as f64;
                assert!((chance_recall(n, g, k) - exact).abs() < 1e-12, "n {n} g {g} k {k}");
            }
        }
    }
}

#[test]
fn csv_has_rows_and_aggregates() {
    let rows = vec![
        LanguageMetrics {
            lang: lang("en"),
            recalls: [50.0, 60.0, 70.0, 40.0, 50.0, 60.0],
            mean_recall: 55.0,
        },
        LanguageMetrics {
            lang: lang("de"),
            recalls: [10.04, 20.05, 30.0, 40.0, 50.0, 60.0],
            mean_recall: 35.015,
        },
    ];
    let report = MetricsReport::new(rows, &[lang("en")]).unwrap();
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lang,i2s_r1,i2s_r5,i2s_r10,s2i_r1,s2i_r5,s2i_r10,mR");
    assert_eq!(lines[1], "en,50.0,60.0,70.0,40.0,50.0,60.0,55.0");
    assert_eq!(lines[2], "de,10.0,20.1,30.0,40.0,50.0,60.0,35.0");
    assert_eq!(lines[3], "HA,,,,,,,55.0");
    assert_eq!(lines[4], "A,,,,,,,45.0");
}

fn tiny() -> SyntheticData {
    generate_synthetic(&SyntheticConfig {
        num_images: 24,
        num_languages: 3,
        concepts: 8,
        vocab_per_lang: 24,
        pretrained_dim: 8,
        feature_dim: 10,
        human_languages: Some(2),
        split_fractions: (0.5, 0.25),
        seed: 5,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_model(data: &SyntheticData, languages: Option<Vec<LanguageId>>) -> TrainedModel {
    let mut cfg = ModelConfig {
        joint_dim: 6,
        image_hidden: 16,
        epochs: 2,
        batch_size: 4,
        languages,
        ..Default::default()
    };
    cfg.pretrain.hem.universal_dim = 6;
    cfg.pretrain.hem.reduced_dim = 4;
    cfg.pretrain.hem.latent_size = 16;
    cfg.pretrain.hem.k = 4;
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch_size = 4;
    train(
        TrainInputs {
            corpus: &data.corpus,
            vectors: &data.vectors,
            pretrained: None,
            dictionary: None,
        },
        &cfg,
    )
    .unwrap()
}

#[test]
fn direct_mode_reports_every_language_and_human_subset() {
    let data = tiny();
    let m = tiny_model(&data, None);
    let report = evaluate(&m.model, &m.store, &data.corpus, Split::Test, &EvalMode::Direct, &EvalOptions::default()).unwrap();
    assert_eq!(report.rows.len(), 3);
    let human = data.corpus.human_languages(Split::Test);
    assert_eq!(report.human.len(), human.len());
    let mean = report.rows.iter().map(|r| r.mean_recall).sum::<f64>() / 3.0;
    assert!((report.a - mean).abs() < 1e-12);
}

#[test]
fn pivot_only_model_direct_mode_skips_unknown_languages() {
    let data = tiny();
    let pivot = data.corpus.languages[0].clone();
    let m = tiny_model(&data, Some(vec![pivot.clone()]));
    let report = evaluate(&m.model, &m.store, &data.corpus, Split::Test, &EvalMode::Direct, &EvalOptions::default()).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].lang, pivot);
}

#[test]
fn translation_modes_need_a_translator() {
    let data = tiny();
    let m = tiny_model(&data, None);
    for mode in [EvalMode::ClcAverage, EvalMode::TransPivot { pivot: data.corpus.languages[0].clone() }] {
        assert!(evaluate(&m.model, &m.store, &data.corpus, Split::Test, &mode, &EvalOptions::default()).is_err());
    }
}

#[test]
fn pivot_only_average_fusion_equals_translate_to_pivot() {
    // With one model language, every score vector has a single entry: the
    // score of the query translated into the pivot.
    let data = tiny();
    let pivot = data.corpus.languages[0].clone();
    let m = tiny_model(&data, Some(vec![pivot.clone()]));
    let translator = Translator::from_corpus(&data.corpus, 0.1).unwrap();
    let opts = EvalOptions {
        translator: Some(&translator),
        classifier: None,
        seed: 3,
    };
    let pivot_report = evaluate(&m.model, &m.store, &data.corpus, Split::Test, &EvalMode::TransPivot { pivot }, &opts).unwrap();
    let clc_report = evaluate(&m.model, &m.store, &data.corpus, Split::Test, &EvalMode::ClcAverage, &opts).unwrap();
    assert_eq!(pivot_report, clc_report);
    assert_eq!(pivot_report.rows.len(), 3);
}

#[test]
fn classifier_mode_uses_the_given_weights() {
    let data = tiny();
    let m = tiny_model(&data, None);
    let translator = Translator::from_corpus(&data.corpus, 0.1).unwrap();
    // A classifier computing the plain mean (+1 to stay above the relu
    // threshold) ranks exactly like average fusion.
    let l = 3;
    let mut w1 = vec![0.0; l * 32];
    for row in 0..l {
        w1[row * 32] = 1.0 / l as f64;
    }
    let mut b1 = vec![0.0; 32];
    b1[0] = 1.0;
    let clf = ClcClassifier::from_weights(Tensor::new(vec![l, 32], w1).unwrap(), Tensor::vector(b1)).unwrap();
    let opts = EvalOptions {
        translator: Some(&translator),
        classifier: Some(&clf),
        seed: 3,
    };
    let avg = evaluate(&m.model, &m.store, &data.corpus, Split::Test, &EvalMode::ClcAverage, &opts).unwrap();
    let learned = evaluate(&m.model, &m.store, &data.corpus, Split::Test, &EvalMode::ClcClassifier, &opts).unwrap();
    for (a, b) in avg.rows.iter().zip(&learned.rows) {
        for (x, y) in a.recalls.iter().zip(&b.recalls) {
            assert!((x - y).abs() < 1e-9);
        }
    }
    let without = EvalOptions { classifier: None, ..opts };
    assert!(evaluate(&m.model, &m.store, &data.corpus, Split::Test, &EvalMode::ClcClassifier, &without).is_err());
}
