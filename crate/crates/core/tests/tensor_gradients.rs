//! Every differentiable primitive against central finite differences.

use polyembed_core::tensor::{fd_check, Graph, NodeId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 100;
const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts `x` against fixed random weights so upstream gradients are generic.
fn reduce(g: &mut Graph, rng: &mut ChaCha8Rng, x: NodeId) -> NodeId {
    let w = rand_tensor(rng, g.value(x).shape());
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

fn check<F>(name: &str, build: F)
where
    F: Fn(&mut Graph, &mut ParamStore, &mut ChaCha8Rng) -> NodeId,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let out = build(&mut g, &mut store, &mut rng);
        let loss = if g.value(out).numel() == 1 && g.value(out).shape().is_empty() {
            out
        } else {
            reduce(&mut g, &mut rng, out)
        };
        let err = fd_check(&g, &store, loss, EPS).unwrap();
        assert!(err < TOL, "{name}: seed {seed} rel err {err:e}");
    }
}

fn param(g: &mut Graph, s: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> NodeId {
    let id = s.add(name, rand_tensor(rng, shape), true);
    g.param(s, id)
}

#[test]
fn matmul_and_transpose() {
    check("matmul", |g, s, r| {
        let a = param(g, s, r, "a", &[3, 4]);
        let b = param(g, s, r, "b", &[4, 2]);
        g.matmul(a, b).unwrap()
    });
    check("transpose", |g, s, r| {
        let a = param(g, s, r, "a", &[3, 4]);
        g.transpose(a).unwrap()
    });
}

#[test]
fn elementwise_arithmetic() {
    check("add/sub/mul", |g, s, r| {
        let a = param(g, s, r, "a", &[2, 3]);
        let b = param(g, s, r, "b", &[2, 3]);
        let sum = g.add(a, b).unwrap();
        let diff = g.sub(sum, b).unwrap();
        let prod = g.mul(diff, b).unwrap();
        let sc = g.scale(prod, -1.7).unwrap();
        g.add_scalar(sc, 0.3).unwrap()
    });
    check("add_row", |g, s, r| {
        let a = param(g, s, r, "a", &[4, 3]);
        let b = param(g, s, r, "b", &[3]);
        g.add_row(a, b).unwrap()
    });
}

#[test]
fn shape_ops() {
    check("concat/slice", |g, s, r| {
        let a = param(g, s, r, "a", &[2, 3]);
        let b = param(g, s, r, "b", &[2, 2]);
        let c = g.concat_cols(&[a, b]).unwrap();
        let d = param(g, s, r, "d", &[1, 5]);
        let e = g.concat_rows(&[c, d]).unwrap();
        g.slice_cols(e, 1, 3).unwrap()
    });
    check("gather", |g, s, r| {
        let a = param(g, s, r, "a", &[5, 3]);
        let rows = g.gather_rows(a, vec![4, 0, 4, 2]).unwrap();
        let el = g.gather_elems(a, vec![0, 7, 7, 14]).unwrap();
        let rs = reduce(g, r, rows);
        let es = reduce(g, r, el);
        g.add(rs, es).unwrap()
    });
    check("reductions", |g, s, r| {
        let a = param(g, s, r, "a", &[3, 4]);
        let m0 = g.mean_axis(a, 0).unwrap();
        let m1 = g.sum_axis(a, 1).unwrap();
        let m2 = g.mean_axis(a, 1).unwrap();
        let x = reduce(g, r, m0);
        let y = reduce(g, r, m1);
        let z = reduce(g, r, m2);
        let xy = g.add(x, y).unwrap();
        g.add(xy, z).unwrap()
    });
}

#[test]
fn activations() {
    check("tanh", |g, s, r| {
        let a = param(g, s, r, "a", &[3, 3]);
        g.tanh(a).unwrap()
    });
    check("sigmoid", |g, s, r| {
        let a = param(g, s, r, "a", &[3, 3]);
        g.sigmoid(a).unwrap()
    });
    check("relu", |g, s, r| {
        let a = param(g, s, r, "a", &[3, 3]);
        g.relu(a).unwrap()
    });
}

#[test]
fn gated_recurrent_step() {
    check("gru_step", |g, s, r| {
        let x = param(g, s, r, "x", &[3, 4]);
        let h = param(g, s, r, "h", &[3, 5]);
        let wx = param(g, s, r, "wx", &[4, 15]);
        let wh = param(g, s, r, "wh", &[5, 15]);
        let b = param(g, s, r, "b", &[15]);
        let h1 = g.gru_step(x, h, wx, wh, b, vec![true, false, true]).unwrap();
        g.gru_step(x, h1, wx, wh, b, vec![true, true, false]).unwrap()
    });
}

#[test]
fn norms_and_distances() {
    check("l2_normalize", |g, s, r| {
        let a = param(g, s, r, "a", &[3, 4]);
        g.l2_normalize(a).unwrap()
    });
    check("cosine_distance 8-D", |g, s, r| {
        let a = param(g, s, r, "a", &[8]);
        let b = param(g, s, r, "b", &[8]);
        g.cosine_distance(a, b).unwrap()
    });
    check("cosine_distance rows", |g, s, r| {
        let a = param(g, s, r, "a", &[3, 5]);
        let b = param(g, s, r, "b", &[3, 5]);
        g.cosine_distance(a, b).unwrap()
    });
    check("pairwise cosine", |g, s, r| {
        let a = param(g, s, r, "a", &[3, 5]);
        let b = param(g, s, r, "b", &[4, 5]);
        g.pairwise_cosine_distance(a, b).unwrap()
    });
    check("norm", |g, s, r| {
        let a = param(g, s, r, "a", &[3, 4]);
        g.norm(a).unwrap()
    });
}

#[test]
fn softmax_cross_entropy() {
    check("softmax_ce", |g, s, r| {
        let a = param(g, s, r, "a", &[4, 3]);
        let labels = (0..4).map(|_| r.gen_range(0..3)).collect();
        g.softmax_cross_entropy(a, labels).unwrap()
    });
}

#[test]
fn reversal_and_straight_through_replay_consistently() {
    check("gradient_reversal", |g, s, r| {
        let a = param(g, s, r, "a", &[2, 3]);
        let t = g.tanh(a).unwrap();
        let rev = g.gradient_reversal(t).unwrap();
        let b = g.mul(rev, t).unwrap();
        g.add(b, t).unwrap()
    });
    check("straight_through", |g, s, r| {
        let a = param(g, s, r, "a", &[2, 3]);
        let b = param(g, s, r, "b", &[2, 3]);
        let st = g.straight_through(a, b).unwrap();
        g.tanh(st).unwrap()
    });
}

#[test]
fn cosine_distance_gradient_matches_reversed_sign_of_reversal() {
    // Embedder side of a reversal node sees exactly −1 × the plain gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let id = store.add("x", rand_tensor(&mut rng, &[8]), true);
    let y = rand_tensor(&mut rng, &[8]);
    let plain = {
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let c = g.constant(y.clone());
        let d = g.cosine_distance(x, c).unwrap();
        g.backward(d).unwrap()
    };
    let reversed = {
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let r = g.gradient_reversal(x).unwrap();
        let c = g.constant(y);
        let d = g.cosine_distance(r, c).unwrap();
        g.backward(d).unwrap()
    };
    let p = plain.get(id).unwrap().data();
    let q = reversed.get(id).unwrap().data();
    for (a, b) in p.iter().zip(q) {
        assert_eq!(*a, -*b);
    }
}

#[test]
fn quadratic_toy_graph_is_tight() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![0.4, -1.3, 2.2]), true);
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq).unwrap();
    let err = fd_check(&g, &store, loss, 1e-4).unwrap();
    assert!(err < 1e-6, "{err:e}");
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    fn nonzero_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, n).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn l2_normalize_is_unit_and_idempotent(v in nonzero_vec(6)) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(v));
            let y = g.l2_normalize(x).unwrap();
            let z = g.l2_normalize(y).unwrap();
            prop_assert!((g.value(y).norm() - 1.0).abs() <= 1e-12);
            for (a, b) in g.value(y).data().iter().zip(g.value(z).data()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn cosine_distance_range(a in nonzero_vec(5), b in nonzero_vec(5)) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(a));
            let y = g.constant(Tensor::vector(b));
            let d = g.cosine_distance(x, y).unwrap();
            let self_d = g.cosine_distance(x, x).unwrap();
            let dv = g.value(d).item();
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&dv));
            prop_assert!(g.value(self_d).item().abs() <= 1e-12);
        }
    }
}
