use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{HemError, Result};
use crate::corpus::LanguageId;
use crate::tensor::Tensor;
use crate::vocab::VocabSplit;

/// Random exploration among the best-matching latent tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exploration {
    /// Probability of exploring instead of taking the argmax.
    pub p: f64,
    /// Exploration draws uniformly from this many top-ranked tokens.
    pub m: usize,
}

impl Default for Exploration {
    fn default() -> Self {
        Self { p: 0.2, m: 20 }
    }
}

impl Exploration {
    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) || self.m == 0 {
            return Err(HemError::Config("exploration needs p in [0, 1] and M ≥ 1".into()));
        }
        Ok(())
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity of `word` against every row of `latent`. Zero rows score 0.
pub fn latent_similarities(word: &[f64], latent: &Tensor) -> Result<Vec<f64>> {
    let nw = l2(word);
    if nw == 0.0 {
        return Err(HemError::ZeroVector);
    }
    if latent.rows() == 0 {
        return Err(HemError::Config("latent table is empty".into()));
    }
    if latent.cols() != word.len() {
        return Err(HemError::Config(format!(
            "word vector has {} dims, latent rows have {}",
            word.len(),
            latent.cols()
        )));
    }
    Ok((0..latent.rows())
        .map(|r| {
            let row = latent.row(r);
            let nr = l2(row);
            if nr == 0.0 {
                0.0
            } else {
                row.iter().zip(word).map(|(a, b)| a * b).sum::<f64>() / (nr * nw)
            }
        })
        .collect())
}

fn rank_order(scores: &[f64], a: usize, b: usize) -> std::cmp::Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Latent rows by descending similarity, ties by ascending index.
pub fn score_latent_tokens(word: &[f64], latent: &Tensor) -> Result<Vec<usize>> {
    let scores = latent_similarities(word, latent)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| rank_order(&scores, a, b));
    Ok(order)
}

/// The `m` best indices in rank order.
pub fn top_m(scores: &[f64], m: usize) -> Vec<usize> {
    let m = m.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if m == 0 {
        return Vec::new();
    }
    if m < idx.len() {
        idx.select_nth_unstable_by(m - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(m);
    }
    idx.sort_by(|&a, &b| rank_order(scores, a, b));
    idx
}

/// Argmax, or with probability `p` a uniform pick among the top `M`.
/// The coin is always drawn when exploring so the stream stays aligned.
pub fn assign_token(scores: &[f64], explore: Option<Exploration>, rng: &mut impl Rng) -> usize {
    match explore {
        Some(e) if rng.gen::<f64>() < e.p => {
            let top = top_m(scores, e.m);
            top[rng.gen_range(0..top.len())]
        }
        _ => top_m(scores, 1)[0],
    }
}

/// `(language, word) → latent row` for every language-agnostic word.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentMap {
    /// `[lang][word]`; `None` for language-specific words.
    pub rows: Vec<Vec<Option<usize>>>,
    pub frozen: bool,
}

impl AssignmentMap {
    pub fn get(&self, lang: usize, word: usize) -> Option<usize> {
        self.rows.get(lang).and_then(|r| r.get(word)).copied().flatten()
    }

    /// Checks that exactly the agnostic words are assigned, within `rows` latent rows.
    pub fn check_total(&self, split: &VocabSplit, latent_rows: usize) -> Result<()> {
        for (l, agnostic) in split.agnostic.iter().enumerate() {
            let assigned = self.rows[l].iter().filter(|r| r.is_some()).count();
            if assigned != agnostic.len() {
                return Err(HemError::Assignment(format!(
                    "language #{l}: {assigned} assigned words for {} agnostic words",
                    agnostic.len()
                )));
            }
            if let Some(&w) = agnostic.iter().find(|&&w| self.rows[l][w].is_none()) {
                return Err(HemError::Assignment(format!("language #{l}: agnostic word {w} unassigned")));
            }
            if let Some(r) = self.rows[l].iter().flatten().find(|&&r| r >= latent_rows) {
                return Err(HemError::Assignment(format!("latent row {r} out of range")));
            }
        }
        Ok(())
    }

    /// Which latent rows have at least one word.
    pub fn used(&self, latent_rows: usize) -> Vec<bool> {
        let mut used = vec![false; latent_rows];
        for r in self.rows.iter().flatten().flatten() {
            used[*r] = true;
        }
        used
    }

    pub fn write_tsv(&self, path: &Path, languages: &[LanguageId]) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# frozen={}", self.frozen)?;
        for (l, rows) in self.rows.iter().enumerate() {
            for (word, r) in rows.iter().enumerate() {
                if let Some(r) = r {
                    writeln!(w, "{}\t{word}\t{r}", languages[l])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `lang \t word \t latent_idx`; `vocab_sizes` fixes the map's shape.
    pub fn read_tsv(path: &Path, languages: &[LanguageId], vocab_sizes: &[usize]) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut rows: Vec<Vec<Option<usize>>> = vocab_sizes.iter().map(|&v| vec![None; v]).collect();
        let mut frozen = false;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let bad = |msg: String| HemError::Parse { line: i + 1, msg };
            if let Some(rest) = line.strip_prefix("# frozen=") {
                frozen = rest.trim() == "true";
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad("expected lang, word, latent index".into()));
            }
            let l = languages
                .iter()
                .position(|x| x.as_str() == f[0])
                .ok_or_else(|| bad(format!("unknown language {:?}", f[0])))?;
            let w: usize = f[1].parse().map_err(|_| bad(format!("bad word id {:?}", f[1])))?;
            let r: usize = f[2].parse().map_err(|_| bad(format!("bad latent index {:?}", f[2])))?;
            *rows[l].get_mut(w).ok_or_else(|| bad(format!("word {w} outside vocabulary")))? = Some(r);
        }
        Ok(Self { rows, frozen })
    }
}

/// Drops latent rows nobody uses. Returns the compacted table and the map
/// with indices rewritten; every word keeps exactly the same vector.
pub fn prune_unused(latent: &Tensor, map: &AssignmentMap) -> Result<(Tensor, AssignmentMap)> {
    if !map.frozen {
        return Err(HemError::Assignment("prune requires a frozen assignment".into()));
    }
    let used = map.used(latent.rows());
    let mut remap = vec![usize::MAX; latent.rows()];
    let mut data = Vec::new();
    let mut next = 0;
    for (r, &u) in used.iter().enumerate() {
        if u {
            remap[r] = next;
            next += 1;
            data.extend_from_slice(latent.row(r));
        }
    }
    let table = Tensor::new(vec![next, latent.cols()], data)?;
    let rows = map
        .rows
        .iter()
        .map(|lang| lang.iter().map(|r| r.map(|r| remap[r])).collect())
        .collect();
    Ok((table, AssignmentMap { rows, frozen: true }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn self_similarity_ranks_first() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.3, 0.9], vec![-1.0, 0.2]]).unwrap();
        assert_eq!(score_latent_tokens(&[0.3, 0.9], &t).unwrap()[0], 1);
        assert!(matches!(score_latent_tokens(&[0.0, 0.0], &t), Err(HemError::ZeroVector)));
    }

    #[test]
    fn identical_rows_tie_to_lower_index() {
        let t = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(score_latent_tokens(&[1.0, 1.0], &t).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn degenerate_exploration_is_argmax() {
        let scores = [0.1, 0.9, 0.5, 0.7];
        let mut rng = stream(4, 0);
        for _ in 0..200 {
            assert_eq!(assign_token(&scores, Some(Exploration { p: 0.0, m: 3 }), &mut rng), 1);
            assert_eq!(assign_token(&scores, Some(Exploration { p: 1.0, m: 1 }), &mut rng), 1);
            assert_eq!(assign_token(&scores, None, &mut rng), 1);
        }
    }

    #[test]
    fn top_m_matches_full_sort() {
        let scores = [0.3, 0.3, 0.9, -0.1, 0.3, 0.8];
        assert_eq!(top_m(&scores, 4), vec![2, 5, 0, 1]);
        assert_eq!(top_m(&scores, 10).len(), 6);
    }

    #[test]
    fn pruning_keeps_vectors() {
        let t = Tensor::from_rows(&(0..40).map(|i| vec![i as f64, -(i as f64)]).collect::<Vec<_>>()).unwrap();
        let map = AssignmentMap {
            rows: vec![vec![Some(7), None, Some(30)], vec![Some(7), Some(2)]],
            frozen: true,
        };
        let (p, m) = prune_unused(&t, &map).unwrap();
        assert_eq!(p.rows(), 3);
        for (l, lang) in map.rows.iter().enumerate() {
            for (w, r) in lang.iter().enumerate() {
                if let Some(r) = r {
                    assert_eq!(t.row(*r), p.row(m.get(l, w).unwrap()));
                }
            }
        }
        let unfrozen = AssignmentMap { frozen: false, ..map };
        assert!(prune_unused(&t, &unfrozen).is_err());
    }
}
