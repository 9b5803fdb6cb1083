use super::{Graph, NodeId, ParamStore, Result};

/// Compares `backward` against central finite differences for every entry
/// of every trainable parameter on the tape. Returns the largest relative
/// error `|g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn fd_check(graph: &Graph, store: &ParamStore, loss: NodeId, eps: f64) -> Result<f64> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let grads = graph.backward(loss)?;
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for pid in graph.params() {
        let n = store.get(pid).numel();
        for k in 0..n {
            let orig = store.get(pid).data()[k];
            work.get_mut(pid).data_mut()[k] = orig + eps;
            let up = graph.replay(&work, loss)?.item();
            work.get_mut(pid).data_mut()[k] = orig - eps;
            let down = graph.replay(&work, loss)?.item();
            work.get_mut(pid).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let ad = grads.get(pid).map_or(0.0, |g| g.data()[k]);
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
