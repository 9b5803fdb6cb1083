use rand::seq::index::sample;
use rand::Rng;

use super::{LossError, Result};
use crate::tensor::{Graph, NodeId};

/// How many of `len` tokens to mask: `round(ratio · len)` clamped to `[1, len − 1]`.
pub fn mask_count(len: usize, ratio: f64) -> Result<usize> {
    if len < 2 {
        return Err(LossError::TooShort(len));
    }
    let raw = (ratio * len as f64).round() as usize;
    Ok(raw.clamp(1, len - 1))
}

/// Sorted positions to mask.
pub fn choose_mask(len: usize, ratio: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let k = mask_count(len, ratio)?;
    let mut positions = sample(rng, len, k).into_vec();
    positions.sort_unstable();
    Ok(positions)
}

/// Masked cross-language reconstruction over a batch of paired rows.
///
/// A shared affine predictor reads `[S_i^m, S_j^m]` and emits `[S_i', S_j']`;
/// the loss is `Σ_rows ‖ℓ2(S_i^m + S_i') − ℓ2(S_i)‖ + ‖ℓ2(S_j^m + S_j') − ℓ2(S_j)‖`.
/// All inputs are `rows × d`; `w` is `2d × 2d`, `b` has `2d` entries.
pub fn mclm_loss(
    g: &mut Graph,
    full_i: NodeId,
    masked_i: NodeId,
    full_j: NodeId,
    masked_j: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let d = g.value(full_i).cols();
    for n in [masked_i, full_j, masked_j] {
        if g.value(n).shape() != g.value(full_i).shape() {
            return Err(LossError::Shape(format!(
                "mclm inputs differ: {:?} vs {:?}",
                g.value(n).shape(),
                g.value(full_i).shape()
            )));
        }
    }
    if g.value(w).shape() != [2 * d, 2 * d] {
        return Err(LossError::Shape(format!("predictor is {:?}, expected {0}×{0}", 2 * d)));
    }
    let joined = g.concat_cols(&[masked_i, masked_j])?;
    let pred = g.linear(joined, w, b)?;
    let halves = g.split_cols(pred, &[d, d])?;
    let ti = reconstruction_terms(g, masked_i, halves[0], full_i)?;
    let tj = reconstruction_terms(g, masked_j, halves[1], full_j)?;
    let both = g.add(ti, tj)?;
    Ok(g.sum(both)?)
}

/// Per-row `‖ℓ2(masked + pred) − ℓ2(full)‖`.
pub fn reconstruction_terms(g: &mut Graph, masked: NodeId, pred: NodeId, full: NodeId) -> Result<NodeId> {
    let rec = g.add(masked, pred)?;
    let rec = g.l2_normalize(rec)?;
    let target = g.l2_normalize(full)?;
    let diff = g.sub(rec, target)?;
    Ok(g.norm(diff)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn mask_counts() {
        assert_eq!(mask_count(10, 0.2).unwrap(), 2);
        assert_eq!(mask_count(3, 0.2).unwrap(), 1);
        assert_eq!(mask_count(2, 0.9).unwrap(), 1);
        assert!(mask_count(1, 0.2).is_err());
        for len in 2..60 {
            for ratio in [0.0, 0.1, 0.2, 0.5, 0.99, 1.0] {
                let k = mask_count(len, ratio).unwrap();
                assert!(1 <= k && k < len);
            }
        }
    }

    #[test]
    fn chosen_positions_are_distinct_and_in_range() {
        let mut rng = stream(1, 0);
        for len in 2..20 {
            let pos = choose_mask(len, 0.2, &mut rng).unwrap();
            assert_eq!(pos.len(), mask_count(len, 0.2).unwrap());
            assert!(pos.windows(2).all(|w| w[0] < w[1]));
            assert!(pos.iter().all(|&p| p < len));
        }
    }
}
