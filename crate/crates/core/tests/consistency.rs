use polyembed_core::clc::{clc_adam, clc_average, train_clc, ClcBlock, ClcClassifier, LanguageScores};
use polyembed_core::corpus::LanguageId;
use polyembed_core::losses::LossWeights;
use polyembed_core::rng::stream;
use polyembed_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn scores(rng: &mut impl Rng, langs: usize, n: usize, m: usize) -> LanguageScores {
    LanguageScores {
        languages: (0..langs).map(|l| LanguageId::new(format!("l{l}"))).collect(),
        per_language: (0..langs)
            .map(|_| Tensor::new(vec![n, m], (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect(),
    }
}

fn argmax_per_column(t: &Tensor) -> Vec<usize> {
    (0..t.cols())
        .map(|j| (0..t.rows()).max_by(|&a, &b| t.get(a, j).total_cmp(&t.get(b, j)).then(b.cmp(&a))).unwrap())
        .collect()
}

proptest! {
    #[test]
    fn average_is_the_arithmetic_mean(v in prop::collection::vec(-1.0f64..1.0, 1..12)) {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        prop_assert_eq!(clc_average(&v), mean);
    }

    #[test]
    fn average_fusion_argmax_ignores_language_order(seed in 0u64..5000, langs in 1usize..6) {
        let mut rng = stream(seed, 0);
        let s = scores(&mut rng, langs, 7, 9);
        let mut permuted = s.clone();
        let mut order: Vec<usize> = (0..langs).collect();
        for i in (1..langs).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        permuted.per_language = order.iter().map(|&l| s.per_language[l].clone()).collect();
        prop_assert_eq!(argmax_per_column(&s.fuse(clc_average)), argmax_per_column(&permuted.fuse(clc_average)));
    }
}

#[test]
fn stacked_rows_follow_pair_order() {
    let s = scores(&mut stream(1, 0), 3, 2, 4);
    let stacked = s.stacked();
    assert_eq!(stacked.shape(), &[8, 3]);
    for i in 0..2 {
        for j in 0..4 {
            assert_eq!(stacked.row(i * 4 + j), s.vector(i, j).as_slice());
        }
    }
}

#[test]
fn classifier_size_is_input_times_hidden_plus_bias() {
    assert_eq!(ClcClassifier::new(10, false, 0).parameter_count(), 352);
    assert_eq!(ClcClassifier::new(10, true, 0).parameter_count(), 352 + 33);
}

#[test]
fn classifier_rejects_wrong_width() {
    let clf = ClcClassifier::new(3, false, 0);
    assert!(clf.fuse(&[0.1, 0.2]).is_err());
    let blocks = vec![ClcBlock {
        scores: scores(&mut stream(2, 0), 2, 3, 3),
        sentence_image: vec![0, 1, 2],
    }];
    assert!(train_clc(&mut ClcClassifier::new(3, false, 0), &blocks, 5, &LossWeights::default(), clc_adam()).is_err());
    assert!(train_clc(&mut ClcClassifier::new(3, false, 0), &[], 5, &LossWeights::default(), clc_adam()).is_err());
}

/// Language 0 ranks the ground truth first; the others are noise.
fn informative_blocks(seed: u64) -> Vec<ClcBlock> {
    let mut rng = stream(seed, 0);
    (0..2)
        .map(|_| {
            let (n, m) = (8, 8);
            let mut s = scores(&mut rng, 3, n, m);
            let gt: Vec<usize> = (0..m).collect();
            let clean = &mut s.per_language[0];
            for j in 0..m {
                for i in 0..n {
                    let v = if gt[j] == i { 0.9 } else { rng.gen_range(-0.5..0.5) };
                    clean.data_mut()[i * m + j] = v;
                }
            }
            ClcBlock {
                scores: s,
                sentence_image: gt,
            }
        })
        .collect()
}

#[test]
fn training_runs_exactly_the_requested_iterations_and_lowers_the_loss() {
    let blocks = informative_blocks(3);
    let mut clf = ClcClassifier::new(3, false, 4);
    let before = clf.checksum();
    let report = train_clc(&mut clf, &blocks, 30, &LossWeights::default(), clc_adam()).unwrap();
    assert_eq!(report.iterations, 30);
    assert_eq!(report.losses.len(), 30);
    assert_ne!(clf.checksum(), before);
    assert!(report.final_loss < report.initial_loss, "{report:?}");
}

#[test]
fn zero_iterations_leave_weights_untouched() {
    let blocks = informative_blocks(5);
    let mut clf = ClcClassifier::new(3, false, 6);
    let before = clf.clone();
    let report = train_clc(&mut clf, &blocks, 0, &LossWeights::default(), clc_adam()).unwrap();
    assert_eq!(clf, before);
    assert_eq!(report.initial_loss, report.final_loss);
}

#[test]
fn training_is_deterministic() {
    let blocks = informative_blocks(7);
    let run = || {
        let mut clf = ClcClassifier::new(3, true, 8);
        let r = train_clc(&mut clf, &blocks, 10, &LossWeights::default(), clc_adam()).unwrap();
        (clf.checksum(), r)
    };
    assert_eq!(run(), run());
}
