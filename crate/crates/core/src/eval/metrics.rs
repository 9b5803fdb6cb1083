use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::corpus::LanguageId;
use crate::tensor::Tensor;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    ImageToSentence,
    SentenceToImage,
}

/// `images × sentences` scores for one language, with each sentence's
/// ground-truth image row.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    scores: Tensor,
    sentence_image: Vec<usize>,
}

impl ScoreMatrix {
    pub fn new(scores: Tensor, sentence_image: Vec<usize>) -> Result<Self> {
        if scores.shape().len() != 2 || scores.rows() == 0 || scores.cols() == 0 {
            return Err(EvalError::Empty);
        }
        if sentence_image.len() != scores.cols() {
            return Err(EvalError::Shape(format!(
                "{} ground-truth entries for {} sentences",
                sentence_image.len(),
                scores.cols()
            )));
        }
        if let Some(&i) = sentence_image.iter().find(|&&i| i >= scores.rows()) {
            return Err(EvalError::Shape(format!("ground-truth image {i} out of range")));
        }
        if !scores.is_finite() {
            return Err(EvalError::Shape("score matrix has non-finite entries".into()));
        }
        Ok(Self { scores, sentence_image })
    }

    pub fn images(&self) -> usize {
        self.scores.rows()
    }

    pub fn sentences(&self) -> usize {
        self.scores.cols()
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn sentence_image(&self) -> &[usize] {
        &self.sentence_image
    }

    /// Zero-based rank of candidate `target` among `scores`: how many
    /// candidates score higher, or equal with a lower index.
    fn rank(scores: impl Iterator<Item = f64> + Clone, target: usize, value: f64) -> usize {
        scores
            .enumerate()
            .filter(|&(c, s)| s > value || (s == value && c < target))
            .count()
    }

    /// Best (smallest) rank of a ground-truth candidate, per query.
    pub fn ground_truth_ranks(&self, direction: Direction) -> Vec<usize> {
        let (n, m) = (self.images(), self.sentences());
        match direction {
            Direction::ImageToSentence => {
                let mut gt: Vec<Vec<usize>> = vec![Vec::new(); n];
                for (j, &i) in self.sentence_image.iter().enumerate() {
                    gt[i].push(j);
                }
                (0..n)
                    .filter(|&i| !gt[i].is_empty())
                    .map(|i| {
                        let row = self.scores.row(i);
                        gt[i]
                            .iter()
                            .map(|&j| Self::rank(row.iter().copied(), j, row[j]))
                            .min()
                            .expect("nonempty")
                    })
                    .collect()
            }
            Direction::SentenceToImage => (0..m)
                .map(|j| {
                    let i = self.sentence_image[j];
                    let column = (0..n).map(|r| self.scores.get(r, j));
                    Self::rank(column, i, self.scores.get(i, j))
                })
                .collect(),
        }
    }
}

/// Percentage of queries with a ground-truth candidate in the top `k`.
/// Image queries without any sentence in the matrix are skipped. Ties rank
/// by ascending candidate index.
pub fn recall_at_k(matrix: &ScoreMatrix, k: usize, direction: Direction) -> Result<f64> {
    if k == 0 {
        return Err(EvalError::Shape("K must be at least 1".into()));
    }
    let ranks = matrix.ground_truth_ranks(direction);
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
}

/// `[i2s R@1, R@5, R@10, s2i R@1, R@5, R@10]`
pub fn recalls(matrix: &ScoreMatrix) -> Result<[f64; 6]> {
    let mut out = [0.0; 6];
    for (d, dir) in [Direction::ImageToSentence, Direction::SentenceToImage].into_iter().enumerate() {
        let ranks = matrix.ground_truth_ranks(dir);
        if ranks.is_empty() {
            return Err(EvalError::Empty);
        }
        for (i, &k) in RECALL_KS.iter().enumerate() {
            out[3 * d + i] = 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64;
        }
    }
    Ok(out)
}

/// Mean of the six recalls, unrounded.
pub fn mean_recall(recalls: &[f64; 6]) -> f64 {
    recalls.iter().sum::<f64>() / 6.0
}

/// Rounds half-up to one decimal. Values are nudged by a tiny epsilon so
/// that decimal halves that land just below `.x5` in binary still round up.
pub fn round1(x: f64) -> f64 {
    ((x * 10.0) + 0.5 + 1e-9).floor() / 10.0
}

/// `(HA, A)`: mean over the human-annotated languages and over all languages.
pub fn aggregate(per_language: &[(LanguageId, f64)], human: &[LanguageId]) -> Result<(f64, f64)> {
    if per_language.is_empty() || human.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut ha = 0.0;
    for h in human {
        let v = per_language
            .iter()
            .find(|(l, _)| l == h)
            .ok_or_else(|| EvalError::Shape(format!("human language {h} has no score")))?;
        ha += v.1;
    }
    let a = per_language.iter().map(|(_, v)| v).sum::<f64>() / per_language.len() as f64;
    Ok((ha / human.len() as f64, a))
}

/// Analytic chance recall for a query with `relevant` of `candidates` items
/// correct under a uniformly random ranking: `1 − C(n−g, k) / C(n, k)`.
pub fn chance_recall(candidates: usize, relevant: usize, k: usize) -> f64 {
    if relevant == 0 {
        return 0.0;
    }
    let k = k.min(candidates);
    let mut miss = 1.0;
    for t in 0..k {
        let num = candidates.saturating_sub(relevant + t) as f64;
        miss *= num / (candidates - t) as f64;
    }
    1.0 - miss
}

/// Chance mR (percent) for a split where image `i` has `sentences_per_image[i]`
/// ground-truth sentences.
pub fn chance_mean_recall(sentences_per_image: &[usize]) -> f64 {
    let n_img = sentences_per_image.len();
    let n_sent: usize = sentences_per_image.iter().sum();
    let queried: Vec<usize> = sentences_per_image.iter().copied().filter(|&g| g > 0).collect();
    let mut total = 0.0;
    for &k in &RECALL_KS {
        let i2s = queried.iter().map(|&g| chance_recall(n_sent, g, k)).sum::<f64>() / queried.len() as f64;
        let s2i = chance_recall(n_img, 1, k);
        total += i2s + s2i;
    }
    100.0 * total / 6.0
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageMetrics {
    pub lang: LanguageId,
    pub recalls: [f64; 6],
    pub mean_recall: f64,
}

impl LanguageMetrics {
    pub fn from_matrix(lang: LanguageId, matrix: &ScoreMatrix) -> Result<Self> {
        let recalls = recalls(matrix)?;
        Ok(Self {
            lang,
            mean_recall: mean_recall(&recalls),
            recalls,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<LanguageMetrics>,
    pub human: Vec<LanguageId>,
    pub ha: f64,
    pub a: f64,
}

impl MetricsReport {
    /// Aggregates per-language rows; `human` is narrowed to reported
    /// languages. With no human language among the rows, HA falls back to A.
    pub fn new(rows: Vec<LanguageMetrics>, human: &[LanguageId]) -> Result<Self> {
        let mut human: Vec<LanguageId> = human.iter().filter(|h| rows.iter().any(|r| &r.lang == *h)).cloned().collect();
        let per: Vec<(LanguageId, f64)> = rows.iter().map(|r| (r.lang.clone(), r.mean_recall)).collect();
        if human.is_empty() {
            human = per.iter().map(|(l, _)| l.clone()).collect();
        }
        let (ha, a) = aggregate(&per, &human)?;
        Ok(Self { rows, human, ha, a })
    }

    pub fn row(&self, lang: &str) -> Option<&LanguageMetrics> {
        self.rows.iter().find(|r| r.lang.as_str() == lang)
    }

    /// Recalls and mR to one decimal (half-up); HA and A trailer rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lang,i2s_r1,i2s_r5,i2s_r10,s2i_r1,s2i_r5,s2i_r10,mR\n");
        for r in &self.rows {
            s.push_str(r.lang.as_str());
            for v in r.recalls {
                s.push_str(&format!(",{:.1}", round1(v)));
            }
            s.push_str(&format!(",{:.1}\n", round1(r.mean_recall)));
        }
        s.push_str(&format!("HA,,,,,,,{:.1}\n", round1(self.ha)));
        s.push_str(&format!("A,,,,,,,{:.1}\n", round1(self.a)));
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_scores_are_perfect() {
        let m = ScoreMatrix::new(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0, 1]).unwrap();
        assert_eq!(recall_at_k(&m, 1, Direction::ImageToSentence).unwrap(), 100.0);
        assert_eq!(recall_at_k(&m, 1, Direction::SentenceToImage).unwrap(), 100.0);
    }

    #[test]
    fn constant_scores_rank_by_index() {
        // 100 images, one sentence each; every score ties.
        let m = ScoreMatrix::new(Tensor::filled(&[100, 100], 0.5), (0..100).collect()).unwrap();
        assert_eq!(m.ground_truth_ranks(Direction::SentenceToImage), (0..100).collect::<Vec<_>>());
        assert_eq!(recall_at_k(&m, 1, Direction::SentenceToImage).unwrap(), 1.0);
        assert_eq!(recall_at_k(&m, 10, Direction::ImageToSentence).unwrap(), 10.0);
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round1(79.25), 79.3);
        assert_eq!(round1(77.7333), 77.7);
        assert_eq!(round1(0.05), 0.1);
        assert_eq!(round1(0.0), 0.0);
        assert_eq!(round1(100.0), 100.0);
    }

    #[test]
    fn single_relevant_chance_is_k_over_n() {
        assert!((chance_recall(60, 1, 5) - 5.0 / 60.0).abs() < 1e-15);
        assert_eq!(chance_recall(3, 1, 10), 1.0);
        // Two relevant among 4, top-1: 1 − (2/4).
        assert!((chance_recall(4, 2, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(ScoreMatrix::new(Tensor::zeros(&[0, 0]), vec![]).is_err());
        assert!(ScoreMatrix::new(Tensor::zeros(&[2, 2]), vec![0, 2]).is_err());
        let m = ScoreMatrix::new(Tensor::zeros(&[2, 2]), vec![0, 1]).unwrap();
        assert!(recall_at_k(&m, 0, Direction::ImageToSentence).is_err());
        assert!(aggregate(&[(LanguageId::new("a"), 1.0)], &[LanguageId::new("b")]).is_err());
    }
}
