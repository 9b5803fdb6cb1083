//! Define-by-run computation graph. Every builder call evaluates its node
//! eagerly and appends it to a tape; `backward` walks the tape in reverse.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{
    lead_and_last, matmul_nt, matmul_raw, matmul_tn, ParamId, ParamStore, Result, Tensor,
    TensorError,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Const,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize, len: usize },
    GatherRows { x: NodeId, idx: Vec<usize> },
    GatherElems { x: NodeId, idx: Vec<usize> },
    SumAll(NodeId),
    SumAxis { x: NodeId, axis: usize },
    MeanAxis { x: NodeId, axis: usize },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    GruStep(GruInputs),
    L2Normalize(NodeId),
    CosineDistance(NodeId, NodeId),
    Norm(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
    GradReverse(NodeId),
    StraightThrough(NodeId, NodeId),
}

#[derive(Clone, Debug)]
pub(crate) struct GruInputs {
    x: NodeId,
    h: NodeId,
    wx: NodeId,
    wh: NodeId,
    b: NodeId,
    active: Vec<bool>,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::GatherElems { .. } => "gather_elems",
            Op::SumAll(_) => "sum_all",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::GruStep(_) => "gru_step",
            Op::L2Normalize(_) => "l2_normalize",
            Op::CosineDistance(..) => "cosine_distance",
            Op::Norm(_) => "norm",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::GradReverse(_) => "gradient_reversal",
            Op::StraightThrough(..) => "straight_through",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Const | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::CosineDistance(a, b)
            | Op::StraightThrough(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::SumAll(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::L2Normalize(x)
            | Op::Norm(x)
            | Op::GradReverse(x) => vec![*x],
            Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::GatherElems { x, .. }
            | Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::GruStep(g) => vec![g.x, g.h, g.wx, g.wh, g.b],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Arc<Tensor>,
    /// Intermediates cached by the forward pass (GRU gates, softmax probabilities).
    aux: Vec<Vec<f64>>,
}

/// Reverse-mode tape over dense tensors.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter, accumulated over every use of the parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Euclidean norm over all gradient entries.
    pub fn norm(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// `self += weight · other`
    pub fn add_scaled(&mut self, other: &Gradients, weight: f64) {
        for (id, g) in &other.by_param {
            let scaled = g.map(|v| v * weight);
            match self.by_param.get_mut(id) {
                Some(acc) => acc.add_assign(&scaled),
                None => {
                    self.by_param.insert(*id, scaled);
                }
            }
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
    }
}

fn require_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn without_last(shape: &[usize]) -> Vec<usize> {
    shape[..shape.len().saturating_sub(1)].to_vec()
}

type Eval = (Tensor, Vec<Vec<f64>>);

/// Forward rule for every non-leaf op. `args` follow `Op::inputs` order.
fn eval(op: &Op, args: &[&Tensor]) -> Result<Eval> {
    let name = op.name();
    let plain = |t: Tensor| Ok((t, Vec::new()));
    match op {
        Op::Const | Op::Param(_) => unreachable!("leaves are not evaluated"),
        Op::MatMul(..) => {
            let (m, k) = require_2d(name, args[0])?;
            let (k2, n) = require_2d(name, args[1])?;
            if k != k2 {
                return Err(shape_err(name, format!("{m}x{k} · {k2}x{n}")));
            }
            plain(Tensor::matrix(m, n, matmul_raw(args[0].data(), args[1].data(), m, k, n))?)
        }
        Op::Transpose(_) => {
            let (r, c) = require_2d(name, args[0])?;
            let src = args[0].data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = src[i * c + j];
                }
            }
            plain(Tensor::matrix(c, r, out)?)
        }
        Op::Add(..) | Op::Sub(..) | Op::Mul(..) => {
            require_same(name, args[0], args[1])?;
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add(..) => |a, b| a + b,
                Op::Sub(..) => |a, b| a - b,
                _ => |a, b| a * b,
            };
            let data = args[0]
                .data()
                .iter()
                .zip(args[1].data())
                .map(|(&a, &b)| f(a, b))
                .collect();
            plain(Tensor::new(args[0].shape().to_vec(), data)?)
        }
        Op::AddRow(..) => {
            let (x, bias) = (args[0], args[1]);
            let n = x.cols();
            if bias.numel() != n {
                return Err(shape_err(name, format!("{:?} + bias {:?}", x.shape(), bias.shape())));
            }
            let b = bias.data();
            let mut data = x.data().to_vec();
            if n > 0 {
                for row in data.chunks_mut(n) {
                    for (v, bv) in row.iter_mut().zip(b) {
                        *v += bv;
                    }
                }
            }
            plain(Tensor::new(x.shape().to_vec(), data)?)
        }
        Op::Scale(_, s) => plain(args[0].map(|v| v * s)),
        Op::AddScalar(_, s) => plain(args[0].map(|v| v + s)),
        Op::ConcatCols(_) => {
            let rows = require_2d(name, args[0])?.0;
            let mut total = 0;
            for a in args {
                let (r, c) = require_2d(name, a)?;
                if r != rows {
                    return Err(shape_err(name, format!("row counts {r} vs {rows}")));
                }
                total += c;
            }
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for a in args {
                    data.extend_from_slice(a.row(i));
                }
            }
            plain(Tensor::matrix(rows, total, data)?)
        }
        Op::ConcatRows(_) => {
            let cols = require_2d(name, args[0])?.1;
            let mut rows = 0;
            let mut data = Vec::new();
            for a in args {
                let (r, c) = require_2d(name, a)?;
                if c != cols {
                    return Err(shape_err(name, format!("column counts {c} vs {cols}")));
                }
                rows += r;
                data.extend_from_slice(a.data());
            }
            plain(Tensor::matrix(rows, cols, data)?)
        }
        Op::SliceCols { start, len, .. } => {
            let (r, c) = require_2d(name, args[0])?;
            if start + len > c {
                return Err(shape_err(name, format!("cols {start}..{} of {c}", start + len)));
            }
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&args[0].row(i)[*start..start + len]);
            }
            plain(Tensor::matrix(r, *len, data)?)
        }
        Op::GatherRows { idx, .. } => {
            let (r, c) = require_2d(name, args[0])?;
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= r {
                    return Err(TensorError::Index {
                        op: name,
                        index: i,
                        extent: r,
                    });
                }
                data.extend_from_slice(args[0].row(i));
            }
            plain(Tensor::matrix(idx.len(), c, data)?)
        }
        Op::GatherElems { idx, .. } => {
            let src = args[0].data();
            let mut data = Vec::with_capacity(idx.len());
            for &i in idx {
                data.push(*src.get(i).ok_or(TensorError::Index {
                    op: name,
                    index: i,
                    extent: src.len(),
                })?);
            }
            plain(Tensor::vector(data))
        }
        Op::SumAll(_) => plain(Tensor::scalar(args[0].data().iter().sum())),
        Op::SumAxis { axis, .. } | Op::MeanAxis { axis, .. } => {
            let (r, c) = require_2d(name, args[0])?;
            let mean = matches!(op, Op::MeanAxis { .. });
            let src = args[0].data();
            match axis {
                0 => {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for (o, v) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                            *o += v;
                        }
                    }
                    if mean {
                        if r == 0 {
                            return Err(shape_err(name, "mean over an empty axis".into()));
                        }
                        out.iter_mut().for_each(|v| *v /= r as f64);
                    }
                    plain(Tensor::matrix(1, c, out)?)
                }
                1 => {
                    if mean && c == 0 {
                        return Err(shape_err(name, "mean over an empty axis".into()));
                    }
                    let out = (0..r)
                        .map(|i| {
                            let s: f64 = src[i * c..(i + 1) * c].iter().sum();
                            if mean {
                                s / c as f64
                            } else {
                                s
                            }
                        })
                        .collect();
                    plain(Tensor::matrix(r, 1, out)?)
                }
                _ => Err(shape_err(name, format!("axis {axis} on a matrix"))),
            }
        }
        Op::Tanh(_) => plain(args[0].map(f64::tanh)),
        Op::Sigmoid(_) => plain(args[0].map(sigmoid)),
        Op::Relu(_) => plain(args[0].map(|v| v.max(0.0))),
        Op::GruStep(g) => gru_forward(g, args),
        Op::L2Normalize(_) => {
            let (lead, last) = lead_and_last(args[0]);
            let src = args[0].data();
            let mut out = vec![0.0; src.len()];
            for i in 0..lead {
                let row = &src[i * last..(i + 1) * last];
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    return Err(TensorError::ZeroVector { op: name });
                }
                for (o, v) in out[i * last..(i + 1) * last].iter_mut().zip(row) {
                    *o = v / n;
                }
            }
            plain(Tensor::new(args[0].shape().to_vec(), out)?)
        }
        Op::CosineDistance(..) => {
            require_same(name, args[0], args[1])?;
            let (lead, last) = lead_and_last(args[0]);
            let (a, b) = (args[0].data(), args[1].data());
            let mut out = Vec::with_capacity(lead);
            for i in 0..lead {
                let ra = &a[i * last..(i + 1) * last];
                let rb = &b[i * last..(i + 1) * last];
                let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    return Err(TensorError::ZeroVector { op: name });
                }
                let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                out.push(1.0 - dot / (na * nb));
            }
            plain(Tensor::new(without_last(args[0].shape()), out)?)
        }
        Op::Norm(_) => {
            let (lead, last) = lead_and_last(args[0]);
            let src = args[0].data();
            let out = (0..lead)
                .map(|i| src[i * last..(i + 1) * last].iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            plain(Tensor::new(without_last(args[0].shape()), out)?)
        }
        Op::SoftmaxCrossEntropy { labels, .. } => {
            let (b, c) = require_2d(name, args[0])?;
            if labels.len() != b || b == 0 {
                return Err(shape_err(name, format!("{} labels for {b} rows", labels.len())));
            }
            let mut probs = Vec::with_capacity(b * c);
            let mut loss = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(TensorError::Index {
                        op: name,
                        index: y,
                        extent: c,
                    });
                }
                let row = args[0].row(i);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                let lse = mx + z.ln();
                loss += lse - row[y];
                probs.extend(row.iter().map(|v| (v - lse).exp()));
            }
            Ok((Tensor::scalar(loss / b as f64), vec![probs]))
        }
        Op::GradReverse(_) => plain(args[0].clone()),
        Op::StraightThrough(..) => {
            require_same(name, args[0], args[1])?;
            plain(args[0].clone())
        }
    }
}

fn gru_forward(g: &GruInputs, args: &[&Tensor]) -> Result<Eval> {
    let name = "gru_step";
    let (x, h, wx, wh, b) = (args[0], args[1], args[2], args[3], args[4]);
    let (bsz, din) = require_2d(name, x)?;
    let (bh, hid) = require_2d(name, h)?;
    let wx_shape = require_2d(name, wx)?;
    let wh_shape = require_2d(name, wh)?;
    if bh != bsz
        || wx_shape != (din, 3 * hid)
        || wh_shape != (hid, 3 * hid)
        || b.numel() != 3 * hid
        || g.active.len() != bsz
    {
        return Err(shape_err(
            name,
            format!(
                "x {:?}, h {:?}, wx {:?}, wh {:?}, b {:?}, mask {}",
                x.shape(),
                h.shape(),
                wx.shape(),
                wh.shape(),
                b.shape(),
                g.active.len()
            ),
        ));
    }
    let gx = matmul_raw(x.data(), wx.data(), bsz, din, 3 * hid);
    let gh = matmul_raw(h.data(), wh.data(), bsz, hid, 3 * hid);
    let bias = b.data();
    let mut r = vec![0.0; bsz * hid];
    let mut z = vec![0.0; bsz * hid];
    let mut n = vec![0.0; bsz * hid];
    let mut hn = vec![0.0; bsz * hid];
    let mut out = h.data().to_vec();
    for i in 0..bsz {
        if !g.active[i] {
            continue;
        }
        let row = i * 3 * hid;
        for k in 0..hid {
            let o = i * hid + k;
            let rv = sigmoid(gx[row + k] + gh[row + k] + bias[k]);
            let zv = sigmoid(gx[row + hid + k] + gh[row + hid + k] + bias[hid + k]);
            let hnv = gh[row + 2 * hid + k];
            let nv = (gx[row + 2 * hid + k] + rv * hnv + bias[2 * hid + k]).tanh();
            r[o] = rv;
            z[o] = zv;
            n[o] = nv;
            hn[o] = hnv;
            out[o] = (1.0 - zv) * nv + zv * h.data()[o];
        }
    }
    Ok((Tensor::matrix(bsz, hid, out)?, vec![r, z, n, hn]))
}

/// Vector-Jacobian products. Returns one gradient per input of `op`.
fn vjp(op: &Op, args: &[&Tensor], out: &Tensor, aux: &[Vec<f64>], g: &Tensor) -> Result<Vec<Tensor>> {
    Ok(match op {
        Op::Const | Op::Param(_) => Vec::new(),
        Op::MatMul(..) => {
            let (m, k) = require_2d("matmul", args[0])?;
            let n = args[1].cols();
            let ga = matmul_nt(g.data(), args[1].data(), m, n, k);
            let gb = matmul_tn(args[0].data(), g.data(), m, k, n);
            vec![Tensor::matrix(m, k, ga)?, Tensor::matrix(k, n, gb)?]
        }
        Op::Transpose(_) => {
            let (r, c) = require_2d("transpose", args[0])?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = g.data()[j * r + i];
                }
            }
            vec![Tensor::matrix(r, c, out)?]
        }
        Op::Add(..) => vec![g.clone(), g.clone()],
        Op::Sub(..) => vec![g.clone(), g.map(|v| -v)],
        Op::Mul(..) => {
            let ga = g.data().iter().zip(args[1].data()).map(|(a, b)| a * b).collect();
            let gb = g.data().iter().zip(args[0].data()).map(|(a, b)| a * b).collect();
            vec![
                Tensor::new(g.shape().to_vec(), ga)?,
                Tensor::new(g.shape().to_vec(), gb)?,
            ]
        }
        Op::AddRow(..) => {
            let n = args[1].numel();
            let mut gb = vec![0.0; n];
            if n > 0 {
                for row in g.data().chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            vec![g.clone(), Tensor::new(args[1].shape().to_vec(), gb)?]
        }
        Op::Scale(_, s) => vec![g.map(|v| v * s)],
        Op::AddScalar(..) => vec![g.clone()],
        Op::ConcatCols(_) => {
            let rows = g.rows();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(args.len());
            for a in args {
                let c = a.cols();
                let mut data = Vec::with_capacity(rows * c);
                for i in 0..rows {
                    data.extend_from_slice(&g.row(i)[offset..offset + c]);
                }
                grads.push(Tensor::matrix(rows, c, data)?);
                offset += c;
            }
            grads
        }
        Op::ConcatRows(_) => {
            let cols = g.cols();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(args.len());
            for a in args {
                let n = a.numel();
                grads.push(Tensor::matrix(a.rows(), cols, g.data()[offset..offset + n].to_vec())?);
                offset += n;
            }
            grads
        }
        Op::SliceCols { start, len, .. } => {
            let (r, c) = require_2d("slice_cols", args[0])?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                out[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
            }
            vec![Tensor::matrix(r, c, out)?]
        }
        Op::GatherRows { idx, .. } => {
            let c = args[0].cols();
            let mut out = Tensor::zeros(args[0].shape());
            let data = out.data_mut();
            for (k, &i) in idx.iter().enumerate() {
                for (o, v) in data[i * c..(i + 1) * c].iter_mut().zip(&g.data()[k * c..(k + 1) * c]) {
                    *o += v;
                }
            }
            vec![out]
        }
        Op::GatherElems { idx, .. } => {
            let mut out = Tensor::zeros(args[0].shape());
            let data = out.data_mut();
            for (k, &i) in idx.iter().enumerate() {
                data[i] += g.data()[k];
            }
            vec![out]
        }
        Op::SumAll(_) => vec![Tensor::filled(args[0].shape(), g.item())],
        Op::SumAxis { axis, .. } | Op::MeanAxis { axis, .. } => {
            let (r, c) = require_2d("reduce_axis", args[0])?;
            let scale = match (op, axis) {
                (Op::MeanAxis { .. }, 0) => 1.0 / r as f64,
                (Op::MeanAxis { .. }, _) => 1.0 / c as f64,
                _ => 1.0,
            };
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    let gv = if *axis == 0 { g.data()[j] } else { g.data()[i] };
                    out[i * c + j] = gv * scale;
                }
            }
            vec![Tensor::matrix(r, c, out)?]
        }
        Op::Tanh(_) => {
            let d = g.data().iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect();
            vec![Tensor::new(g.shape().to_vec(), d)?]
        }
        Op::Sigmoid(_) => {
            let d = g.data().iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
            vec![Tensor::new(g.shape().to_vec(), d)?]
        }
        Op::Relu(_) => {
            let d = g
                .data()
                .iter()
                .zip(args[0].data())
                .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                .collect();
            vec![Tensor::new(g.shape().to_vec(), d)?]
        }
        Op::GruStep(gi) => gru_backward(gi, args, aux, g)?,
        Op::L2Normalize(_) => {
            let (lead, last) = lead_and_last(args[0]);
            let (x, y) = (args[0].data(), out.data());
            let mut d = vec![0.0; x.len()];
            for i in 0..lead {
                let s = i * last..(i + 1) * last;
                let n = x[s.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                let gs = &g.data()[s.clone()];
                let ys = &y[s.clone()];
                let proj: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                for ((o, gv), yv) in d[s].iter_mut().zip(gs).zip(ys) {
                    *o = (gv - yv * proj) / n;
                }
            }
            vec![Tensor::new(args[0].shape().to_vec(), d)?]
        }
        Op::CosineDistance(..) => {
            let (lead, last) = lead_and_last(args[0]);
            let (a, b) = (args[0].data(), args[1].data());
            let mut da = vec![0.0; a.len()];
            let mut db = vec![0.0; b.len()];
            for i in 0..lead {
                let s = i * last..(i + 1) * last;
                let (ra, rb) = (&a[s.clone()], &b[s.clone()]);
                let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                let cos = dot / (na * nb);
                let gv = g.data()[i];
                for k in 0..last {
                    // d(1 - cos)/da = -(b/(|a||b|) - cos·a/|a|²)
                    da[i * last + k] = -gv * (rb[k] / (na * nb) - cos * ra[k] / (na * na));
                    db[i * last + k] = -gv * (ra[k] / (na * nb) - cos * rb[k] / (nb * nb));
                }
            }
            vec![
                Tensor::new(args[0].shape().to_vec(), da)?,
                Tensor::new(args[1].shape().to_vec(), db)?,
            ]
        }
        Op::Norm(_) => {
            let (lead, last) = lead_and_last(args[0]);
            let x = args[0].data();
            let mut d = vec![0.0; x.len()];
            for i in 0..lead {
                let n = out.data()[i];
                // subgradient 0 at the origin
                if n == 0.0 {
                    continue;
                }
                for k in 0..last {
                    d[i * last + k] = g.data()[i] * x[i * last + k] / n;
                }
            }
            vec![Tensor::new(args[0].shape().to_vec(), d)?]
        }
        Op::SoftmaxCrossEntropy { labels, .. } => {
            let (b, c) = require_2d("softmax_cross_entropy", args[0])?;
            let mut d = aux[0].clone();
            for (i, &y) in labels.iter().enumerate() {
                d[i * c + y] -= 1.0;
            }
            let scale = g.item() / b as f64;
            d.iter_mut().for_each(|v| *v *= scale);
            vec![Tensor::matrix(b, c, d)?]
        }
        Op::GradReverse(_) => vec![g.map(|v| -v)],
        Op::StraightThrough(..) => vec![g.clone(), g.clone()],
    })
}

fn gru_backward(gi: &GruInputs, args: &[&Tensor], aux: &[Vec<f64>], g: &Tensor) -> Result<Vec<Tensor>> {
    let (x, h, wx, wh) = (args[0], args[1], args[2], args[3]);
    let (bsz, din) = (x.rows(), x.cols());
    let hid = h.cols();
    let (r, z, n, hn) = (&aux[0], &aux[1], &aux[2], &aux[3]);
    let gd = g.data();
    let hd = h.data();
    let mut dgx = vec![0.0; bsz * 3 * hid];
    let mut dgh = vec![0.0; bsz * 3 * hid];
    let mut dh = vec![0.0; bsz * hid];
    for i in 0..bsz {
        if !gi.active[i] {
            dh[i * hid..(i + 1) * hid].copy_from_slice(&gd[i * hid..(i + 1) * hid]);
            continue;
        }
        let row = i * 3 * hid;
        for k in 0..hid {
            let o = i * hid + k;
            let gv = gd[o];
            let dn = gv * (1.0 - z[o]);
            let dz = gv * (hd[o] - n[o]);
            dh[o] += gv * z[o];
            let da_n = dn * (1.0 - n[o] * n[o]);
            let da_z = dz * z[o] * (1.0 - z[o]);
            let d_hn = da_n * r[o];
            let da_r = da_n * hn[o] * r[o] * (1.0 - r[o]);
            dgx[row + k] = da_r;
            dgx[row + hid + k] = da_z;
            dgx[row + 2 * hid + k] = da_n;
            dgh[row + k] = da_r;
            dgh[row + hid + k] = da_z;
            dgh[row + 2 * hid + k] = d_hn;
        }
    }
    let dx = matmul_nt(&dgx, wx.data(), bsz, 3 * hid, din);
    let dh_lin = matmul_nt(&dgh, wh.data(), bsz, 3 * hid, hid);
    for (a, b) in dh.iter_mut().zip(&dh_lin) {
        *a += b;
    }
    let dwx = matmul_tn(x.data(), &dgx, bsz, din, 3 * hid);
    let dwh = matmul_tn(hd, &dgh, bsz, hid, 3 * hid);
    let mut db = vec![0.0; 3 * hid];
    for row in dgx.chunks(3 * hid) {
        for (o, v) in db.iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(vec![
        Tensor::matrix(bsz, din, dx)?,
        Tensor::matrix(bsz, hid, dh)?,
        Tensor::matrix(din, 3 * hid, dwx)?,
        Tensor::matrix(hid, 3 * hid, dwh)?,
        Tensor::new(args[4].shape().to_vec(), db)?,
    ])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push_leaf(&mut self, op: Op, value: Arc<Tensor>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            aux: Vec::new(),
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let inputs = op.inputs();
        let args: Vec<&Tensor> = inputs.iter().map(|i| &*self.nodes[i.0].value).collect();
        let (value, aux) = eval(&op, &args)?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                node: self.nodes.len(),
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            aux,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Input tensor that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_leaf(Op::Const, Arc::new(t))
    }

    /// Leaf bound to a stored parameter. Gradients flow back to `id` only
    /// if the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if !store.is_trainable(id) {
            return self.push_leaf(Op::Const, store.shared(id));
        }
        self.push_leaf(Op::Param(id), store.shared(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    /// Adds a bias vector to every row (last-axis broadcast).
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(x, s))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceCols { x, start, len })
    }

    /// Splits a matrix into consecutive column blocks of the given widths.
    pub fn split_cols(&mut self, x: NodeId, widths: &[usize]) -> Result<Vec<NodeId>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice_cols(x, start, w)?);
            start += w;
        }
        Ok(out)
    }

    /// Embedding lookup: selects rows of a matrix.
    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        self.push(Op::GatherRows { x, idx })
    }

    /// Selects entries by flat row-major index into a vector.
    pub fn gather_elems(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        self.push(Op::GatherElems { x, idx })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::SumAll(x))
    }

    /// Sum over `axis` of a matrix, keeping the reduced axis with extent 1.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.push(Op::SumAxis { x, axis })
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.push(Op::MeanAxis { x, axis })
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(x))
    }

    /// One gated-recurrent-cell step over a batch of rows.
    ///
    /// `wx` is `in × 3h`, `wh` is `h × 3h`, `b` has `3h` entries; column
    /// blocks are ordered reset, update, candidate. Rows with `active[i] ==
    /// false` copy their hidden state through unchanged.
    pub fn gru_step(
        &mut self,
        x: NodeId,
        h: NodeId,
        wx: NodeId,
        wh: NodeId,
        b: NodeId,
        active: Vec<bool>,
    ) -> Result<NodeId> {
        self.push(Op::GruStep(GruInputs {
            x,
            h,
            wx,
            wh,
            b,
            active,
        }))
    }

    /// Normalizes along the last axis; a zero vector is an error.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::L2Normalize(x))
    }

    /// `1 − cos(a, b)` along the last axis; drops that axis.
    pub fn cosine_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::CosineDistance(a, b))
    }

    /// Euclidean norm along the last axis; drops that axis.
    pub fn norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Norm(x))
    }

    /// Mean softmax cross-entropy of `logits` (batch × classes).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        self.push(Op::SoftmaxCrossEntropy { logits, labels })
    }

    /// Identity forward, negated gradient backward.
    pub fn gradient_reversal(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::GradReverse(x))
    }

    /// Forward value of `value`; the incoming gradient is passed unchanged
    /// to both `value` and `proxy`.
    pub fn straight_through(&mut self, value: NodeId, proxy: NodeId) -> Result<NodeId> {
        self.push(Op::StraightThrough(value, proxy))
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// All-pairs cosine distance between rows of `a` (m×d) and `b` (n×d).
    pub fn pairwise_cosine_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let an = self.l2_normalize(a)?;
        let bn = self.l2_normalize(b)?;
        let bt = self.transpose(bn)?;
        let sim = self.matmul(an, bt)?;
        let neg = self.scale(sim, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    /// Gradients of a scalar node with respect to every trainable parameter
    /// that feeds it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(pid) => match out.by_param.get_mut(pid) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.by_param.insert(*pid, g);
                    }
                },
                op => {
                    let inputs = op.inputs();
                    let args: Vec<&Tensor> = inputs.iter().map(|n| &*self.nodes[n.0].value).collect();
                    let input_grads = vjp(op, &args, &node.value, &node.aux, &g)?;
                    for (inp, ig) in inputs.into_iter().zip(input_grads) {
                        match &mut grads[inp.0] {
                            Some(acc) => acc.add_assign(&ig),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Re-evaluates the tape up to `target` with parameter values read from
    /// `store`. Gradient-reversal nodes evaluate as `2·x₀ − x` and
    /// straight-through nodes as `a + (b − b₀)`, where `x₀`, `b₀` are the
    /// values recorded when the tape was built: the value at the recorded
    /// point is unchanged, and the derivative of the replayed function is
    /// exactly what `backward` propagates.
    pub fn replay(&self, store: &ParamStore, target: NodeId) -> Result<Tensor> {
        let mut vals: Vec<Arc<Tensor>> = Vec::with_capacity(target.0 + 1);
        for (i, node) in self.nodes[..=target.0].iter().enumerate() {
            let v = match &node.op {
                Op::Const => Arc::clone(&node.value),
                Op::Param(pid) => store.shared(*pid),
                Op::GradReverse(x) => {
                    let (cur, orig) = (&vals[x.0], &self.nodes[x.0].value);
                    let data = cur.data().iter().zip(orig.data()).map(|(c, o)| 2.0 * o - c).collect();
                    Arc::new(Tensor::new(cur.shape().to_vec(), data)?)
                }
                Op::StraightThrough(a, b) => {
                    let (va, vb, b0) = (&vals[a.0], &vals[b.0], &self.nodes[b.0].value);
                    let data = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .zip(b0.data())
                        .map(|((a, b), b0)| a + (b - b0))
                        .collect();
                    Arc::new(Tensor::new(va.shape().to_vec(), data)?)
                }
                op => {
                    let args: Vec<&Tensor> = op.inputs().iter().map(|n| &*vals[n.0]).collect();
                    let (v, _) = eval(op, &args)?;
                    if !v.is_finite() {
                        return Err(TensorError::NonFinite { node: i, op: op.name() });
                    }
                    Arc::new(v)
                }
            };
            vals.push(v);
        }
        Ok(Arc::try_unwrap(vals.pop().expect("target exists")).unwrap_or_else(|a| (*a).clone()))
    }

    /// Parameters referenced by the tape, in first-use order.
    pub fn params(&self) -> Vec<ParamId> {
        let mut seen = Vec::new();
        for n in &self.nodes {
            if let Op::Param(p) = n.op {
                if !seen.contains(&p) {
                    seen.push(p);
                }
            }
        }
        seen
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fd_check;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = g.l2_normalize(x).unwrap();
        assert!(approx(g.value(y).data()[0], 0.6, 1e-15));
        assert!(approx(g.value(y).data()[1], 0.8, 1e-15));
    }

    #[test]
    fn cosine_distance_of_orthogonal_units() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let d = g.cosine_distance(a, b).unwrap();
        assert_eq!(g.value(d).item(), 1.0);
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::scalar(3.0), true);
        let mut g = Graph::new();
        let x = g.param(&store, p);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(p).unwrap().item(), 6.0);
    }

    #[test]
    fn reversal_negates_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::vector(vec![1.0, -2.0]), true);
        let mut g = Graph::new();
        let x = g.param(&store, p);
        let r = g.gradient_reversal(x).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, -2.0]);
        let w = g.constant(Tensor::vector(vec![0.5, 3.0]));
        let prod = g.mul(r, w).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[-0.5, -3.0]);
    }

    #[test]
    fn gradients_accumulate_over_uses() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::vector(vec![2.0]), true);
        let mut g = Graph::new();
        let x = g.param(&store, p);
        let a = g.scale(x, 3.0).unwrap();
        let b = g.add(a, x).unwrap();
        let loss = g.sum(b).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(p).unwrap().item(), 4.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn zero_vector_normalize_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.l2_normalize(x), Err(TensorError::ZeroVector { .. })));
    }

    #[test]
    fn overflow_is_reported_with_node() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1e300]));
        let err = g.scale(x, 1e300).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { node: 1, op: "scale" }));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn masked_gru_rows_pass_through() {
        let mut store = ParamStore::new();
        let wx = store.add("wx", Tensor::filled(&[2, 6], 0.3), true);
        let wh = store.add("wh", Tensor::filled(&[2, 6], -0.2), true);
        let b = store.add("b", Tensor::filled(&[6], 0.1), true);
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let h = g.constant(Tensor::matrix(2, 2, vec![0.5, -0.5, 0.25, 0.75]).unwrap());
        let (wx, wh, b) = (g.param(&store, wx), g.param(&store, wh), g.param(&store, b));
        let out = g.gru_step(x, h, wx, wh, b, vec![true, false]).unwrap();
        assert_eq!(g.value(out).row(1), &[0.25, 0.75]);
        assert_ne!(g.value(out).row(0), &[0.5, -0.5]);
    }

    #[test]
    fn zero_loss_graph_has_zero_fd_error() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::vector(vec![1.0, 2.0]), true);
        let mut g = Graph::new();
        let w = g.param(&store, p);
        let z = g.scale(w, 0.0).unwrap();
        let loss = g.sum(z).unwrap();
        assert_eq!(fd_check(&g, &store, loss, 1e-4).unwrap(), 0.0);
    }
}
