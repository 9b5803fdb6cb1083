use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{LossError, Result};
use crate::tensor::{Graph, NodeId};

/// `max(0, m + d⁺ − d⁻)`
pub fn triplet_value(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (margin + d_pos - d_neg).max(0.0)
}

/// Single-triplet loss on vectors under cosine distance.
pub fn triplet_loss(g: &mut Graph, x: NodeId, pos: NodeId, neg: NodeId, margin: f64) -> Result<NodeId> {
    let dp = g.cosine_distance(x, pos)?;
    let dn = g.cosine_distance(x, neg)?;
    let diff = g.sub(dp, dn)?;
    let shifted = g.add_scalar(diff, margin)?;
    let hinge = g.relu(shifted)?;
    Ok(g.sum(hinge)?)
}

/// One selected constraint: `anchor` should be closer to `positive` than to
/// `negative` (both are candidate indices) by the margin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub violation: f64,
}

/// Heap entry ordered so that the *weakest* kept triplet sits on top:
/// smaller violation first, and among equal violations the later one.
struct Kept {
    violation: f64,
    order: usize,
    triplet: Triplet,
}

impl PartialEq for Kept {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Kept {}
impl PartialOrd for Kept {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Kept {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .violation
            .total_cmp(&self.violation)
            .then(self.order.cmp(&other.order))
    }
}

/// Enumerates every `(anchor, positive, negative)` over a row-major
/// `anchors × candidates` distance matrix and keeps the `n` largest strictly
/// positive violations of `m + d(a,p) − d(a,n)`. Enumeration order is anchor,
/// then positive, then negative, each ascending; ties keep the earlier
/// triplet. The result is sorted by descending violation.
pub fn mine_hard_negatives(
    dist: &[f64],
    anchors: usize,
    candidates: usize,
    is_positive: impl Fn(usize, usize) -> bool,
    margin: f64,
    n: usize,
) -> Result<Vec<Triplet>> {
    if dist.len() != anchors * candidates {
        return Err(LossError::Shape(format!(
            "distance matrix has {} entries, expected {anchors}×{candidates}",
            dist.len()
        )));
    }
    let mut any_negative = false;
    let mut heap: BinaryHeap<Kept> = BinaryHeap::with_capacity(n + 1);
    let mut order = 0;
    for a in 0..anchors {
        let row = &dist[a * candidates..(a + 1) * candidates];
        let (pos, neg): (Vec<usize>, Vec<usize>) = (0..candidates).partition(|&c| is_positive(a, c));
        if pos.is_empty() {
            continue;
        }
        any_negative |= !neg.is_empty();
        for &p in &pos {
            for &q in &neg {
                let violation = margin + row[p] - row[q];
                order += 1;
                if violation <= 0.0 || n == 0 {
                    continue;
                }
                let kept = Kept {
                    violation,
                    order,
                    triplet: Triplet {
                        anchor: a,
                        positive: p,
                        negative: q,
                        violation,
                    },
                };
                if heap.len() < n {
                    heap.push(kept);
                } else if heap.peek().is_some_and(|top| kept < *top) {
                    heap.pop();
                    heap.push(kept);
                }
            }
        }
    }
    if !any_negative {
        return Err(LossError::NoNegative);
    }
    let mut out: Vec<Kept> = heap.into_vec();
    out.sort();
    Ok(out.into_iter().map(|k| k.triplet).collect())
}

/// Sum of `max(0, m + d(a,p) − d(a,n))` over the mined triplets, as a graph
/// node over the distance matrix node `dist` (anchors × candidates).
pub fn mined_triplet_loss(g: &mut Graph, dist: NodeId, triplets: &[Triplet], margin: f64) -> Result<NodeId> {
    if triplets.is_empty() {
        return Ok(g.constant(crate::tensor::Tensor::scalar(0.0)));
    }
    let cols = g.value(dist).cols();
    let pos: Vec<usize> = triplets.iter().map(|t| t.anchor * cols + t.positive).collect();
    let neg: Vec<usize> = triplets.iter().map(|t| t.anchor * cols + t.negative).collect();
    let dp = g.gather_elems(dist, pos)?;
    let dn = g.gather_elems(dist, neg)?;
    let diff = g.sub(dp, dn)?;
    let shifted = g.add_scalar(diff, margin)?;
    let hinge = g.relu(shifted)?;
    Ok(g.sum(hinge)?)
}

/// Mines on the current value of `dist` and builds the loss node.
pub fn hard_triplet_loss(
    g: &mut Graph,
    dist: NodeId,
    is_positive: impl Fn(usize, usize) -> bool,
    margin: f64,
    n: usize,
) -> Result<NodeId> {
    let (rows, cols) = (g.value(dist).rows(), g.value(dist).cols());
    let triplets = mine_hard_negatives(g.value(dist).data(), rows, cols, is_positive, margin, n)?;
    mined_triplet_loss(g, dist, &triplets, margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn margin_arithmetic() {
        assert_eq!(triplet_value(0.1, 0.3, 0.05), 0.0);
        assert!((triplet_value(0.4, 0.2, 0.05) - 0.25).abs() < 1e-15);
        assert!((triplet_value(0.3, 0.3, 0.05) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn equal_positive_and_negative_cost_the_margin() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.5, -0.2]));
        let y = g.constant(Tensor::vector(vec![0.3, -0.1, 0.9]));
        let l = triplet_loss(&mut g, x, y, y, 0.05).unwrap();
        assert!((g.value(l).item() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn satisfied_batch_mines_nothing() {
        let dist = [0.0, 1.0, 1.0, 0.0];
        let t = mine_hard_negatives(&dist, 2, 2, |a, c| a == c, 0.05, 10).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn fewer_violations_than_n_are_all_kept() {
        // Three anchors each violated once.
        let dist = [0.5, 0.2, 0.9, 0.9, 0.5, 0.3, 0.2, 0.9, 0.5];
        let t = mine_hard_negatives(&dist, 3, 3, |a, c| a == c, 0.05, 10).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.windows(2).all(|w| w[0].violation >= w[1].violation));
    }

    #[test]
    fn no_negative_is_an_error() {
        let dist = [0.1, 0.2];
        assert!(matches!(
            mine_hard_negatives(&dist, 1, 2, |_, _| true, 0.05, 3),
            Err(LossError::NoNegative)
        ));
    }
}
