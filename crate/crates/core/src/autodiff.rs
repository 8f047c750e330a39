//! Minimal tape-based reverse-mode automatic differentiation over ndarray.
//!
//! The denoiser records its forward computation on a [`Tape`] and then
//! back-propagates a scalar loss to every leaf. The op set is exactly what
//! the architecture needs: dense and batched matrix products, elementwise
//! nonlinearities, layer normalization, masked softmax, and a handful of
//! shape movers. Each op carries a hand-written backward rule; all of them
//! are checked against central finite differences in the tests below, and
//! the full model is checked again end to end in the denoiser tests.
//!
//! Gradients are accumulated deterministically in reverse node order, so a
//! given tape always produces bit-identical results.

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    /// Position in the tape's node (and gradient) vectors.
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// (m,k) x (k,n) -> (m,n)
    MatMul(NodeId, NodeId),
    /// (g,m,k) x (g,k,n) -> (g,m,n)
    BatchMatMul(NodeId, NodeId),
    /// (g,m,k) x (g,n,k)^T -> (g,m,n)
    BatchMatMulTransposed(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// broadcast add of a vector over the last axis
    AddRowVec(NodeId, NodeId),
    /// elementwise product with a constant (masks, fixed scalings)
    MulConst(NodeId, ArrayD<f64>),
    Scale(NodeId, f64),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// softmax over the last axis; any additive logit mask is a constant
    /// applied in the forward pass and carries no gradient
    SoftmaxLast(NodeId),
    /// layer normalization over the last axis with learned gain and shift
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Reshape(NodeId),
    /// permute axes; `perm[i]` is the source axis moved to position `i`
    Permute(NodeId, Vec<usize>),
    /// slice `[start, start+len)` of the last axis
    SliceLast {
        src: NodeId,
        start: usize,
        len: usize,
    },
    /// concatenate along the last axis
    ConcatLast(Vec<NodeId>),
    /// insert a new axis at position `axis`, repeating entries
    BroadcastInsert { src: NodeId, axis: usize },
    SumAll(NodeId),
}

struct Node {
    op: Op,
    value: ArrayD<f64>,
}

/// A define-by-run computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LAYER_NORM_EPS: f64 = 1e-5;
// tanh-form Gaussian error linear unit
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> ArrayViewD<'_, f64> {
        self.nodes[id.0].value.view()
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1);
        v.iter().next().copied().unwrap()
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Record a leaf (input constant or parameter).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let out = av.dot(&bv).into_dyn();
        self.push(Op::MatMul(a, b), out)
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (g, m, k) = dims3(av);
        let (gb, kb, n) = dims3(bv);
        debug_assert_eq!((g, k), (gb, kb));
        let mut out = ArrayD::zeros(IxDyn(&[g, m, n]));
        for gi in 0..g {
            let ai = as2(&av.index_axis(Axis(0), gi).to_owned());
            let bi = as2(&bv.index_axis(Axis(0), gi).to_owned());
            out.index_axis_mut(Axis(0), gi).assign(&ai.dot(&bi));
        }
        self.push(Op::BatchMatMul(a, b), out)
    }

    /// `a @ b^T` per batch: `(g,m,k) x (g,n,k) -> (g,m,n)`.
    pub fn batch_matmul_transposed(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (g, m, k) = dims3(av);
        let (gb, n, kb) = dims3(bv);
        debug_assert_eq!((g, k), (gb, kb));
        let mut out = ArrayD::zeros(IxDyn(&[g, m, n]));
        for gi in 0..g {
            let ai = as2(&av.index_axis(Axis(0), gi).to_owned());
            let bi = as2(&bv.index_axis(Axis(0), gi).to_owned());
            out.index_axis_mut(Axis(0), gi).assign(&ai.dot(&bi.t()));
        }
        self.push(Op::BatchMatMulTransposed(a, b), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(Op::Mul(a, b), out)
    }

    /// `x + v` with `v` broadcast over all leading axes; `v` has the length
    /// of the last axis of `x`.
    pub fn add_row_vec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let vv = &self.nodes[v.0].value;
        debug_assert_eq!(vv.ndim(), 1);
        debug_assert_eq!(xv.shape().last(), vv.shape().last());
        let mut out = xv.clone();
        let c = vv.len();
        for (i, o) in out.iter_mut().enumerate() {
            *o += vv[IxDyn(&[i % c])];
        }
        self.push(Op::AddRowVec(x, v), out)
    }

    pub fn mul_const(&mut self, x: NodeId, c: ArrayD<f64>) -> NodeId {
        let out = &self.nodes[x.0].value * &c;
        self.push(Op::MulConst(x, c), out)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let out = &self.nodes[x.0].value * s;
        self.push(Op::Scale(x, s), out)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        self.push(Op::Relu(x), out)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(gelu_scalar);
        self.push(Op::Gelu(x), out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid(x), out)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(f64::tanh);
        self.push(Op::Tanh(x), out)
    }

    /// Numerically stable softmax over the last axis. `mask`, if given, is
    /// added to the logits first (use large negative values to exclude
    /// positions); it must broadcast to the input shape.
    pub fn softmax_last(&mut self, x: NodeId, mask: Option<&ArrayD<f64>>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut out = match mask {
            Some(m) => xv + m,
            None => xv.clone(),
        };
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(Op::SoftmaxLast(x), out)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let c = *xv.shape().last().unwrap();
        debug_assert_eq!(gv.len(), c);
        debug_assert_eq!(bv.len(), c);
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gv[IxDyn(&[j])] + bv[IxDyn(&[j])];
            }
        }
        self.push(Op::LayerNorm { x, gamma, beta }, out)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let out = reshaped(&self.nodes[x.0].value, shape);
        self.push(Op::Reshape(x), out)
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> NodeId {
        let out = self.nodes[x.0]
            .value
            .clone()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        self.push(Op::Permute(x, perm.to_vec()), out)
    }

    pub fn slice_last(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let xv = &self.nodes[src.0].value;
        let last = xv.ndim() - 1;
        let out = xv
            .slice_axis(Axis(last), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.push(Op::SliceLast { src, start, len }, out)
    }

    pub fn concat_last(&mut self, parts: Vec<NodeId>) -> NodeId {
        let views: Vec<ArrayViewD<'_, f64>> =
            parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let last = views[0].ndim() - 1;
        let out = ndarray::concatenate(Axis(last), &views).expect("concat shape mismatch");
        self.push(Op::ConcatLast(parts), out)
    }

    pub fn broadcast_insert(&mut self, src: NodeId, axis: usize, n: usize) -> NodeId {
        let xv = &self.nodes[src.0].value;
        let mut shape: Vec<usize> = xv.shape().to_vec();
        shape.insert(axis, n);
        let expanded = xv.clone().insert_axis(Axis(axis));
        let out = expanded
            .broadcast(IxDyn(&shape))
            .expect("broadcast shape mismatch")
            .to_owned();
        self.push(Op::BroadcastInsert { src, axis }, out)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.sum();
        self.push(Op::SumAll(x), ArrayD::from_elem(IxDyn(&[]), s))
    }

    /// Back-propagate from a scalar node; returns one gradient slot per
    /// node (None where no gradient flowed).
    pub fn backward(&self, loss: NodeId) -> Vec<Option<ArrayD<f64>>> {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        debug_assert_eq!(self.nodes[loss.0].value.len(), 1);
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0));

        for id in (0..=loss.0).rev() {
            let grad = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(grad);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let av = as2(&self.nodes[a.0].value);
                    let bv = as2(&self.nodes[b.0].value);
                    let gv = as2(&grad);
                    accumulate(&mut grads, *a, gv.dot(&bv.t()).into_dyn());
                    accumulate(&mut grads, *b, av.t().dot(&gv).into_dyn());
                }
                Op::BatchMatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (g, _, _) = dims3(av);
                    let mut da = ArrayD::zeros(av.raw_dim());
                    let mut db = ArrayD::zeros(bv.raw_dim());
                    for gi in 0..g {
                        let ai = as2(&av.index_axis(Axis(0), gi).to_owned());
                        let bi = as2(&bv.index_axis(Axis(0), gi).to_owned());
                        let gi_v = as2(&grad.index_axis(Axis(0), gi).to_owned());
                        da.index_axis_mut(Axis(0), gi).assign(&gi_v.dot(&bi.t()));
                        db.index_axis_mut(Axis(0), gi).assign(&ai.t().dot(&gi_v));
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::BatchMatMulTransposed(a, b) => {
                    // out = a @ b^T : da = grad @ b ; db = grad^T @ a
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (g, _, _) = dims3(av);
                    let mut da = ArrayD::zeros(av.raw_dim());
                    let mut db = ArrayD::zeros(bv.raw_dim());
                    for gi in 0..g {
                        let ai = as2(&av.index_axis(Axis(0), gi).to_owned());
                        let bi = as2(&bv.index_axis(Axis(0), gi).to_owned());
                        let gi_v = as2(&grad.index_axis(Axis(0), gi).to_owned());
                        da.index_axis_mut(Axis(0), gi).assign(&gi_v.dot(&bi));
                        db.index_axis_mut(Axis(0), gi).assign(&gi_v.t().dot(&ai));
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, grad.clone());
                    accumulate(&mut grads, *b, grad);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, grad.clone());
                    accumulate(&mut grads, *b, -grad);
                }
                Op::Mul(a, b) => {
                    let da = &grad * &self.nodes[b.0].value;
                    let db = &grad * &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRowVec(x, v) => {
                    let c = self.nodes[v.0].value.len();
                    let mut dv = ArrayD::zeros(IxDyn(&[c]));
                    for (i, g) in grad.iter().enumerate() {
                        dv[IxDyn(&[i % c])] += *g;
                    }
                    accumulate(&mut grads, *x, grad);
                    accumulate(&mut grads, *v, dv);
                }
                Op::MulConst(x, c) => {
                    accumulate(&mut grads, *x, &grad * c);
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads, *x, &grad * *s);
                }
                Op::Relu(x) => {
                    let dx = ndarray::Zip::from(&grad)
                        .and(&self.nodes[x.0].value)
                        .map_collect(|&g, &v| if v > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let dx = ndarray::Zip::from(&grad)
                        .and(&self.nodes[x.0].value)
                        .map_collect(|&g, &v| g * gelu_grad_scalar(v));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = ndarray::Zip::from(&grad)
                        .and(&self.nodes[id].value)
                        .map_collect(|&g, &y| g * y * (1.0 - y));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let dx = ndarray::Zip::from(&grad)
                        .and(&self.nodes[id].value)
                        .map_collect(|&g, &y| g * (1.0 - y * y));
                    accumulate(&mut grads, *x, dx);
                }
                Op::SoftmaxLast(x) => {
                    let y = &self.nodes[id].value;
                    let mut dx = grad.clone();
                    let last = y.ndim() - 1;
                    let n = y.shape()[last];
                    let rows = y.len() / n;
                    let y_flat = y.view().into_shape_with_order((rows, n)).unwrap();
                    let mut dx_flat = dx.view_mut().into_shape_with_order((rows, n)).unwrap();
                    for r in 0..rows {
                        let yr = y_flat.row(r);
                        let mut gr = dx_flat.row_mut(r);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                        for (g, &yv) in gr.iter_mut().zip(yr.iter()) {
                            *g = yv * (*g - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gamma.0].value;
                    let c = *xv.shape().last().unwrap();
                    let rows = xv.len() / c;
                    let x_flat = xv.view().into_shape_with_order((rows, c)).unwrap();
                    let g_flat = grad.view().into_shape_with_order((rows, c)).unwrap();
                    let mut dx = ArrayD::<f64>::zeros(xv.raw_dim());
                    let mut dgamma = ArrayD::<f64>::zeros(IxDyn(&[c]));
                    let mut dbeta = ArrayD::<f64>::zeros(IxDyn(&[c]));
                    let mut dx_flat = dx.view_mut().into_shape_with_order((rows, c)).unwrap();
                    for r in 0..rows {
                        let xr = x_flat.row(r);
                        let gr = g_flat.row(r);
                        let mean = xr.sum() / c as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        // dL/dx via the standard per-row formula with
                        // h = grad * gamma, xhat = (x - mean)/s:
                        // dx = (h - mean(h) - xhat * mean(h*xhat)) / s
                        let mut mean_h = 0.0;
                        let mut mean_hx = 0.0;
                        for j in 0..c {
                            let xhat = (xr[j] - mean) * inv;
                            let h = gr[j] * gv[IxDyn(&[j])];
                            mean_h += h;
                            mean_hx += h * xhat;
                            dgamma[IxDyn(&[j])] += gr[j] * xhat;
                            dbeta[IxDyn(&[j])] += gr[j];
                        }
                        mean_h /= c as f64;
                        mean_hx /= c as f64;
                        let mut dxr = dx_flat.row_mut(r);
                        for j in 0..c {
                            let xhat = (xr[j] - mean) * inv;
                            let h = gr[j] * gv[IxDyn(&[j])];
                            dxr[j] = (h - mean_h - xhat * mean_hx) * inv;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Reshape(x) => {
                    let dx = reshaped(&grad, self.nodes[x.0].value.shape());
                    accumulate(&mut grads, *x, dx);
                }
                Op::Permute(x, perm) => {
                    let mut inverse = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let dx = grad
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .to_owned();
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceLast { src, start, len } => {
                    let sv = &self.nodes[src.0].value;
                    let last = sv.ndim() - 1;
                    let mut dx = ArrayD::zeros(sv.raw_dim());
                    dx.slice_axis_mut(Axis(last), ndarray::Slice::from(*start..start + len))
                        .assign(&grad);
                    accumulate(&mut grads, *src, dx);
                }
                Op::ConcatLast(parts) => {
                    let last = grad.ndim() - 1;
                    let mut offset = 0usize;
                    for p in parts {
                        let w = *self.nodes[p.0].value.shape().last().unwrap();
                        let dp = grad
                            .slice_axis(Axis(last), ndarray::Slice::from(offset..offset + w))
                            .to_owned();
                        accumulate(&mut grads, *p, dp);
                        offset += w;
                    }
                }
                Op::BroadcastInsert { src, axis } => {
                    let dx = grad.sum_axis(Axis(*axis));
                    accumulate(&mut grads, *src, dx);
                }
                Op::SumAll(x) => {
                    let g = grad.iter().next().copied().unwrap();
                    let dx = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), g);
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        grads
    }
}

/// Row-major reshape that tolerates non-contiguous inputs (e.g. the output
/// of `concatenate`).
fn reshaped(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    match a.clone().into_shape_with_order(IxDyn(shape)) {
        Ok(out) => out,
        Err(_) => a
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch"),
    }
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>) {
    match &mut grads[id.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn as2(a: &ArrayD<f64>) -> ndarray::Array2<f64> {
    let shape = a.shape();
    debug_assert_eq!(shape.len(), 2);
    a.view()
        .into_shape_with_order((shape[0], shape[1]))
        .unwrap()
        .to_owned()
}

fn dims3(a: &ArrayD<f64>) -> (usize, usize, usize) {
    let s = a.shape();
    debug_assert_eq!(s.len(), 3);
    (s[0], s[1], s[2])
}
