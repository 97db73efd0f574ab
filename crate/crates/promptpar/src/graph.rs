//! Reverse-mode automatic differentiation over 2-d `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients into the leaves that were
//! registered with [`Tape::param`]. Leaves registered with [`Tape::constant`]
//! never receive a gradient buffer, which is how the frozen-backbone contract
//! is enforced at the engine level rather than by optimizer convention.
//!
//! All tensors are row-major `Array2<f64>`; token sequences are rows, feature
//! channels are columns. Scalars are 1x1 tensors.

use std::rc::Rc;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

enum Op {
    Leaf,
    /// C = A B
    MatMul(TensorId, TensorId),
    /// C = A B^T
    MatMulT(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    MulElem(TensorId, TensorId),
    Scale(TensorId, f64),
    Transpose(TensorId),
    /// Broadcast-add a 1xN row to every row of A.
    AddRow(TensorId, TensorId),
    ConcatRows(Vec<TensorId>),
    SliceRows(TensorId, usize, usize),
    ConcatCols(Vec<TensorId>),
    SliceCols(TensorId, usize, usize),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Array1<f64>,
        rstd: Array1<f64>,
    },
    Gelu(TensorId),
    Sigmoid(TensorId),
    /// Row-wise softmax. Entries where `mask` is false are exactly zero in
    /// the output and receive no gradient.
    MaskedSoftmax {
        x: TensorId,
        mask: Option<Rc<Array2<bool>>>,
    },
    /// out[i] = dot(A[i,:], B[i,:]) as an Mx1 column.
    RowDot(TensorId, TensorId),
    /// Pairwise cosine similarity between rows of A (PxD) and B (QxD) -> PxQ.
    CosSim {
        a: TensorId,
        b: TensorId,
        norm_a: Array1<f64>,
        norm_b: Array1<f64>,
    },
    /// Column-wise max of a PxQ tensor -> 1xQ, gradient routed to the argmax.
    ColMax(TensorId, Vec<usize>),
    /// Binary cross-entropy per Eq.-style 1/M normalization: scalar output.
    /// `weights`, when present, is one factor per column.
    Bce {
        p: TensorId,
        targets: Rc<Array2<f64>>,
        weights: Option<Rc<Array1<f64>>>,
        clamp: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Forward-pass recording plus backward gradient propagation.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by `TensorId`.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the scalar loss w.r.t. the given node, if one was written.
    pub fn get(&self, id: TensorId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    /// True when a gradient buffer was allocated for the node.
    pub fn populated(&self, id: TensorId) -> bool {
        self.grads[id.0].is_some()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
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

    pub fn value(&self, id: TensorId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Leaf that never accumulates gradient (frozen weights, data).
    pub fn constant(&mut self, value: Array2<f64>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; backward writes its gradient buffer.
    pub fn param(&mut self, value: Array2<f64>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = self.value(a).dot(self.value(b));
        let rg = self.needs(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.needs(&[a, b]);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = self.value(a) + self.value(b);
        let rg = self.needs(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = self.value(a) - self.value(b);
        let rg = self.needs(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = self.value(a) * self.value(b);
        let rg = self.needs(&[a, b]);
        self.push(v, Op::MulElem(a, b), rg)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.value(a) * c;
        let rg = self.needs(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).t().to_owned();
        let rg = self.needs(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> TensorId {
        let v = self.value(a) + self.value(row);
        let rg = self.needs(&[a, row]);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// x W + b with b broadcast over rows.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let pv = self.value(*p);
            v.slice_mut(ndarray::s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        let rg = self.needs(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let v = self
            .value(a)
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        let rg = self.needs(&[a]);
        self.push(v, Op::SliceRows(a, start, len), rg)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let pv = self.value(*p);
            v.slice_mut(ndarray::s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        let rg = self.needs(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let v = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let rg = self.needs(&[a]);
        self.push(v, Op::SliceCols(a, start, len), rg)
    }

    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mean = xv.mean_axis(Axis(1)).expect("nonzero width");
        let mut rstd = Array1::zeros(xv.nrows());
        let mut out = Array2::zeros(xv.raw_dim());
        for i in 0..xv.nrows() {
            let mu = mean[i];
            let var = xv.row(i).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..xv.ncols() {
                out[(i, j)] = (xv[(i, j)] - mu) * r;
            }
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let out = &out * g + b;
        let rg = self.needs(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        )
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).mapv(gelu);
        let rg = self.needs(&[x]);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).mapv(sigmoid);
        let rg = self.needs(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    /// Row-wise softmax with an optional boolean permission mask. Output is
    /// exactly 0.0 wherever the mask forbids attention.
    pub fn masked_softmax(&mut self, x: TensorId, mask: Option<Rc<Array2<bool>>>) -> TensorId {
        let xv = self.value(x);
        if let Some(m) = &mask {
            assert_eq!(
                m.dim(),
                xv.dim(),
                "mask shape must match attention score shape"
            );
        }
        let mut out = Array2::zeros(xv.raw_dim());
        for i in 0..xv.nrows() {
            let allowed = |j: usize| mask.as_ref().is_none_or(|m| m[(i, j)]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..xv.ncols() {
                if allowed(j) && xv[(i, j)] > max {
                    max = xv[(i, j)];
                }
            }
            debug_assert!(max > f64::NEG_INFINITY, "all-masked attention row {i}");
            let mut sum = 0.0;
            for j in 0..xv.ncols() {
                if allowed(j) {
                    let e = (xv[(i, j)] - max).exp();
                    out[(i, j)] = e;
                    sum += e;
                }
            }
            for j in 0..xv.ncols() {
                out[(i, j)] /= sum;
            }
        }
        let rg = self.needs(&[x]);
        self.push(out, Op::MaskedSoftmax { x, mask }, rg)
    }

    pub fn row_dot(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.dim(), bv.dim());
        let mut v = Array2::zeros((av.nrows(), 1));
        for i in 0..av.nrows() {
            v[(i, 0)] = av.row(i).dot(&bv.row(i));
        }
        let rg = self.needs(&[a, b]);
        self.push(v, Op::RowDot(a, b), rg)
    }

    /// Pairwise cosine similarity between rows of `a` and rows of `b`.
    /// Norms are guarded with eps = 1e-8 inside the square root.
    pub fn cosine_rows(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.ncols(), bv.ncols());
        let norm = |m: &Array2<f64>| -> Array1<f64> {
            Array1::from_iter(
                m.rows()
                    .into_iter()
                    .map(|r| (r.dot(&r) + 1e-16).sqrt()),
            )
        };
        let na = norm(av);
        let nb = norm(bv);
        let mut v = Array2::zeros((av.nrows(), bv.nrows()));
        for i in 0..av.nrows() {
            for j in 0..bv.nrows() {
                v[(i, j)] = av.row(i).dot(&bv.row(j)) / (na[i] * nb[j]);
            }
        }
        let rg = self.needs(&[a, b]);
        self.push(
            v,
            Op::CosSim {
                a,
                b,
                norm_a: na,
                norm_b: nb,
            },
            rg,
        )
    }

    /// Column-wise maximum; ties resolve to the earliest row.
    pub fn col_max(&mut self, x: TensorId) -> TensorId {
        let xv = self.value(x);
        let mut v = Array2::zeros((1, xv.ncols()));
        let mut arg = vec![0usize; xv.ncols()];
        for j in 0..xv.ncols() {
            let mut best = f64::NEG_INFINITY;
            for i in 0..xv.nrows() {
                if xv[(i, j)] > best {
                    best = xv[(i, j)];
                    arg[j] = i;
                }
            }
            v[(0, j)] = best;
        }
        let rg = self.needs(&[x]);
        self.push(v, Op::ColMax(x, arg), rg)
    }

    /// Binary cross-entropy with 1/M normalization (M = rows), optional
    /// per-column weights, probabilities clamped to `[clamp, 1-clamp]`
    /// before the logarithms. Returns a 1x1 scalar node.
    pub fn bce(
        &mut self,
        p: TensorId,
        targets: Rc<Array2<f64>>,
        weights: Option<Rc<Array1<f64>>>,
        clamp: f64,
    ) -> TensorId {
        let pv = self.value(p);
        assert_eq!(pv.dim(), targets.dim(), "probability/target shape mismatch");
        if let Some(w) = &weights {
            assert_eq!(w.len(), pv.ncols());
        }
        let m = pv.nrows() as f64;
        let mut total = 0.0;
        for i in 0..pv.nrows() {
            for j in 0..pv.ncols() {
                let pc = pv[(i, j)].clamp(clamp, 1.0 - clamp);
                let y = targets[(i, j)];
                let w = weights.as_ref().map_or(1.0, |w| w[j]);
                total -= w * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
            }
        }
        let v = Array2::from_elem((1, 1), total / m);
        let rg = self.needs(&[p]);
        self.push(
            v,
            Op::Bce {
                p,
                targets,
                weights,
                clamp,
            },
            rg,
        )
    }

    /// Scalar check before seeding the backward pass.
    pub fn scalar(&self, id: TensorId) -> Result<f64> {
        let v = self.value(id);
        if v.dim() != (1, 1) {
            return Err(Error::Contract(format!(
                "expected scalar node, got shape {:?}",
                v.dim()
            )));
        }
        Ok(v[(0, 0)])
    }

    /// Reverse pass from a scalar loss node. Only nodes with
    /// `requires_grad` receive gradient buffers.
    pub fn backward(&self, loss: TensorId) -> Result<Grads> {
        let _ = self.scalar(loss)?;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], id: TensorId, delta: Array2<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(g);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::MatMulT(a, b) => {
                // C = A B^T: dA = G B, dB = G^T A
                let da = g.dot(self.value(*b));
                let db = g.t().dot(self.value(*a));
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::MulElem(a, b) => {
                self.accumulate(grads, *a, g * self.value(*b));
                self.accumulate(grads, *b, g * self.value(*a));
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g * *c);
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.t().to_owned());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(grads, *row, gr);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    let gp = g.slice(ndarray::s![at..at + n, ..]).to_owned();
                    self.accumulate(grads, *p, gp);
                    at += n;
                }
            }
            Op::SliceRows(a, start, len) => {
                let av = self.value(*a);
                let mut da = Array2::zeros(av.raw_dim());
                da.slice_mut(ndarray::s![*start..start + len, ..]).assign(g);
                self.accumulate(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = self.value(*p).ncols();
                    let gp = g.slice(ndarray::s![.., at..at + n]).to_owned();
                    self.accumulate(grads, *p, gp);
                    at += n;
                }
            }
            Op::SliceCols(a, start, len) => {
                let av = self.value(*a);
                let mut da = Array2::zeros(av.raw_dim());
                da.slice_mut(ndarray::s![.., *start..start + len]).assign(g);
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let d = xv.ncols() as f64;
                let mut dx = Array2::zeros(xv.raw_dim());
                let mut dgamma = Array2::zeros((1, xv.ncols()));
                let mut dbeta = Array2::zeros((1, xv.ncols()));
                for i in 0..xv.nrows() {
                    let mu = mean[i];
                    let r = rstd[i];
                    // xhat = (x - mu) * r; out = xhat * gamma + beta
                    let mut sum_gy = 0.0;
                    let mut sum_gy_xhat = 0.0;
                    for j in 0..xv.ncols() {
                        let xhat = (xv[(i, j)] - mu) * r;
                        let gy = g[(i, j)] * gv[(0, j)];
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat;
                        dgamma[(0, j)] += g[(i, j)] * xhat;
                        dbeta[(0, j)] += g[(i, j)];
                    }
                    for j in 0..xv.ncols() {
                        let xhat = (xv[(i, j)] - mu) * r;
                        let gy = g[(i, j)] * gv[(0, j)];
                        dx[(i, j)] = r * (gy - sum_gy / d - xhat * sum_gy_xhat / d);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Gelu(x) => {
                let dv = self.value(*x).mapv(gelu_grad);
                self.accumulate(grads, *x, g * &dv);
            }
            Op::Sigmoid(x) => {
                let s = &self.nodes[idx].value;
                let dv = s * &(1.0 - s);
                self.accumulate(grads, *x, g * &dv);
            }
            Op::MaskedSoftmax { x, mask } => {
                let p = &self.nodes[idx].value;
                let mut dx = Array2::zeros(p.raw_dim());
                for i in 0..p.nrows() {
                    let mut dot = 0.0;
                    for j in 0..p.ncols() {
                        dot += g[(i, j)] * p[(i, j)];
                    }
                    for j in 0..p.ncols() {
                        let allowed = mask.as_ref().is_none_or(|m| m[(i, j)]);
                        if allowed {
                            dx[(i, j)] = p[(i, j)] * (g[(i, j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RowDot(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut da = Array2::zeros(av.raw_dim());
                let mut db = Array2::zeros(bv.raw_dim());
                for i in 0..av.nrows() {
                    let gi = g[(i, 0)];
                    for j in 0..av.ncols() {
                        da[(i, j)] = gi * bv[(i, j)];
                        db[(i, j)] = gi * av[(i, j)];
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::CosSim {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let c = &self.nodes[idx].value;
                let mut da = Array2::zeros(av.raw_dim());
                let mut db = Array2::zeros(bv.raw_dim());
                for i in 0..av.nrows() {
                    for j in 0..bv.nrows() {
                        let gij = g[(i, j)];
                        if gij == 0.0 {
                            continue;
                        }
                        let denom = norm_a[i] * norm_b[j];
                        for k in 0..av.ncols() {
                            da[(i, k)] += gij
                                * (bv[(j, k)] / denom
                                    - c[(i, j)] * av[(i, k)] / (norm_a[i] * norm_a[i]));
                            db[(j, k)] += gij
                                * (av[(i, k)] / denom
                                    - c[(i, j)] * bv[(j, k)] / (norm_b[j] * norm_b[j]));
                        }
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::ColMax(x, arg) => {
                let xv = self.value(*x);
                let mut dx = Array2::zeros(xv.raw_dim());
                for j in 0..xv.ncols() {
                    dx[(arg[j], j)] = g[(0, j)];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Bce {
                p,
                targets,
                weights,
                clamp,
            } => {
                let pv = self.value(*p);
                let m = pv.nrows() as f64;
                let gs = g[(0, 0)];
                let mut dp = Array2::zeros(pv.raw_dim());
                for i in 0..pv.nrows() {
                    for j in 0..pv.ncols() {
                        let raw = pv[(i, j)];
                        // Clamped coordinates sit on a plateau: zero gradient.
                        if raw < *clamp || raw > 1.0 - *clamp {
                            continue;
                        }
                        let y = targets[(i, j)];
                        let w = weights.as_ref().map_or(1.0, |w| w[j]);
                        dp[(i, j)] = gs * w * (-y / raw + (1.0 - y) / (1.0 - raw)) / m;
                    }
                }
                self.accumulate(grads, *p, dp);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences against the tape for a generic builder.
    fn check_grad<F>(build: F, inputs: &[Array2<f64>], tol: f64)
    where
        F: Fn(&mut Tape, &[TensorId]) -> TensorId,
    {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();

        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let g = grads.get(ids[k]).expect("param grad missing");
            for i in 0..x.nrows() {
                for j in 0..x.ncols() {
                    let eval = |delta: f64| {
                        let mut tape = Tape::new();
                        let ids: Vec<TensorId> = inputs
                            .iter()
                            .enumerate()
                            .map(|(m, v)| {
                                let mut v = v.clone();
                                if m == k {
                                    v[(i, j)] += delta;
                                }
                                tape.param(v)
                            })
                            .collect();
                        let loss = build(&mut tape, &ids);
                        tape.scalar(loss).unwrap()
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let ad = g[(i, j)];
                    let denom = fd.abs().max(ad.abs()).max(1e-8);
                    assert!(
                        (fd - ad).abs() / denom < tol,
                        "input {k} coord ({i},{j}): fd={fd} ad={ad}"
                    );
                }
            }
        }
    }

    fn scalarize(tape: &mut Tape, x: TensorId) -> TensorId {
        // Sum of squares via row-dot keeps the check sensitive to every entry.
        let sq = tape.mul_elem(x, x);
        let ones_row = tape.constant(Array2::ones((1, tape.value(sq).nrows())));
        let summed = tape.matmul(ones_row, sq);
        let ones_col = tape.constant(Array2::ones((tape.value(summed).ncols(), 1)));
        tape.matmul(summed, ones_col)
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        check_grad(
            |t, ids| {
                let c = t.matmul(ids[0], ids[1]);
                scalarize(t, c)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn matmul_t_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 5, 4);
        check_grad(
            |t, ids| {
                let c = t.matmul_t(ids[0], ids[1]);
                scalarize(t, c)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 4, 6);
        let gamma = rand_mat(&mut rng, 1, 6);
        let beta = rand_mat(&mut rng, 1, 6);
        check_grad(
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2]);
                scalarize(t, y)
            },
            &[x, gamma, beta],
            1e-5,
        );
    }

    #[test]
    fn masked_softmax_gradients_and_exact_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 3, 5);
        let mut mask = Array2::from_elem((3, 5), true);
        mask[(0, 2)] = false;
        mask[(1, 0)] = false;
        mask[(1, 4)] = false;
        let mask = Rc::new(mask);

        let mut tape = Tape::new();
        let xid = tape.param(x.clone());
        let p = tape.masked_softmax(xid, Some(mask.clone()));
        assert_eq!(tape.value(p)[(0, 2)], 0.0);
        assert_eq!(tape.value(p)[(1, 0)], 0.0);
        for i in 0..3 {
            let s: f64 = tape.value(p).row(i).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        let m2 = mask.clone();
        check_grad(
            move |t, ids| {
                let p = t.masked_softmax(ids[0], Some(m2.clone()));
                scalarize(t, p)
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn gelu_sigmoid_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 3, 3);
        check_grad(
            |t, ids| {
                let g = t.gelu(ids[0]);
                let s = t.sigmoid(g);
                scalarize(t, s)
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn cosine_and_colmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 2, 4);
        check_grad(
            |t, ids| {
                let c = t.cosine_rows(ids[0], ids[1]);
                let m = t.col_max(c);
                scalarize(t, m)
            },
            &[a, b],
            1e-5,
        );
    }

    #[test]
    fn bce_matches_hand_value_and_gradient() {
        // Single cell: y=1, p=0.5, w=1 -> ln 2.
        let mut tape = Tape::new();
        let p = tape.param(array![[0.5]]);
        let y = Rc::new(array![[1.0]]);
        let loss = tape.bce(p, y, None, 1e-7);
        assert!((tape.scalar(loss).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        // d/dp of -ln p at 0.5 is -2.
        assert!((grads.get(p).unwrap()[(0, 0)] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn bce_weighted_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = rand_mat(&mut rng, 4, 3);
        let y = Rc::new(Array2::from_shape_fn((4, 3), |_| {
            if rng.random_bool(0.5) {
                1.0
            } else {
                0.0
            }
        }));
        let w = Rc::new(array![0.5, 1.0, 2.0]);
        check_grad(
            move |t, ids| {
                let p = t.sigmoid(ids[0]);
                t.bce(p, y.clone(), Some(w.clone()), 1e-7)
            },
            &[logits],
            1e-5,
        );
    }

    #[test]
    fn constants_never_get_gradient_buffers() {
        let mut tape = Tape::new();
        let frozen = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let learn = tape.param(array![[1.0, 0.0], [0.0, 1.0]]);
        let prod = tape.matmul(frozen, learn);
        let loss = {
            let sq = tape.mul_elem(prod, prod);
            let ones_row = tape.constant(Array2::ones((1, 2)));
            let s = tape.matmul(ones_row, sq);
            let ones_col = tape.constant(Array2::ones((2, 1)));
            tape.matmul(s, ones_col)
        };
        let grads = tape.backward(loss).unwrap();
        assert!(!grads.populated(frozen));
        assert!(grads.populated(learn));
    }

    #[test]
    fn slice_concat_roundtrip_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_mat(&mut rng, 6, 4);
        check_grad(
            |t, ids| {
                let top = t.slice_rows(ids[0], 0, 2);
                let rest = t.slice_rows(ids[0], 2, 4);
                let swapped = t.concat_rows(&[rest, top]);
                let left = t.slice_cols(swapped, 0, 2);
                let right = t.slice_cols(swapped, 2, 2);
                let back = t.concat_cols(&[right, left]);
                scalarize(t, back)
            },
            &[x],
            1e-6,
        );
    }
}
