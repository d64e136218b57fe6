//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients for every node that (transitively) depends on a differentiable
//! leaf. Parameters from a [`ParamStore`] are bound lazily with
//! [`Graph::param`] and their gradients collected with
//! [`Gradients::for_store`].
//!
//! Image tensors are NCHW; matrices are `[rows, cols]`.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMulNt { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Silu(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    BceLogits { x: Var, target: Vec<f64> },
    LogSoftmaxRows { x: Var, exclude_diag: bool },
    L2NormalizeRows { x: Var, eps: f64 },
    StandardizeSamples { x: Var, eps: f64 },
    Sum(Var),
    Mean(Var),
    MeanSpatial(Var),
    MeanRows(Var),
    SubRow(Var, Var),
    MulChannel(Var, Var),
    MulSpatial(Var, Var),
    ChannelMeanMax { x: Var, argmax: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    PoolRegions { x: Var, regions: Vec<(usize, Vec<usize>)> },
    Grl { x: Var, lambda: f64 },
    DotRows(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient per store parameter, aligned with the store's order.
    /// Parameters that were not bound (or received no signal) map to `None`.
    pub fn for_store(&self, graph: &Graph, store: &ParamStore) -> Vec<Option<Tensor>> {
        (0..store.len())
            .map(|i| {
                graph
                    .bound
                    .get(&ParamId(i))
                    .and_then(|v| self.grads[v.0].clone())
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds `x` (N,C,H,W) into a `[C·k·k, N·Ho·Wo]` column matrix.
fn im2col(x: &[f64], dims: [usize; 4], k: usize, stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let [n, c, h, w] = dims;
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let cols_w = n * ho * wo;
    let mut cols = vec![0.0; c * k * k * cols_w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * cols_w..(row + 1) * cols_w];
                for ni in 0..n {
                    let src = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ni * ho + oy) * wo;
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(cols: &[f64], dims: [usize; 4], k: usize, stride: usize, pad: usize, dx: &mut [f64]) {
    let [n, c, h, w] = dims;
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let cols_w = n * ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * cols_w..(row + 1) * cols_w];
                for ni in 0..n {
                    let dst = &mut dx[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ni * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dims4(shape: &[usize]) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "expected NCHW tensor, got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

fn dims2(shape: &[usize]) -> [usize; 2] {
    assert_eq!(shape.len(), 2, "expected matrix, got {shape:?}");
    [shape[0], shape[1]]
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a store parameter, reusing the same node on repeated calls.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let v = self.variable(store.get(id).clone());
        self.bound.insert(id, v);
        v
    }

    // ---- operations ---------------------------------------------------------

    /// 2-D convolution, weights `[O, C, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let [n, c, h, wd] = dims4(self.shape(x));
        let [o, wc, k, k2] = dims4(self.shape(w));
        assert_eq!(c, wc, "conv channel mismatch");
        assert_eq!(k, k2);
        let (cols, ho, wo) = im2col(self.value(x).data(), [n, c, h, wd], k, stride, pad);
        let cols_w = n * ho * wo;
        let ckk = c * k * k;
        let mut tmp = vec![0.0; o * cols_w];
        gemm(o, ckk, cols_w, self.value(w).data(), (ckk, 1), &cols, (cols_w, 1), &mut tmp, false);
        let mut out = vec![0.0; n * o * ho * wo];
        let hw = ho * wo;
        let bias = b.map(|b| self.value(b).data().to_vec());
        for oi in 0..o {
            let bv = bias.as_ref().map_or(0.0, |b| b[oi]);
            for ni in 0..n {
                let src = &tmp[oi * cols_w + ni * hw..oi * cols_w + (ni + 1) * hw];
                let dst = &mut out[(ni * o + oi) * hw..(ni * o + oi + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[n, o, ho, wo], out), Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    /// `x · wᵀ + b` with `x: [m, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let [m, i] = dims2(self.shape(x));
        let [o, wi] = dims2(self.shape(w));
        assert_eq!(i, wi, "linear input mismatch");
        let mut out = vec![0.0; m * o];
        gemm(m, i, o, self.value(x).data(), (i, 1), self.value(w).data(), (1, i), &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (r, bb) in row.iter_mut().zip(bv) {
                    *r += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[m, o], out), Op::Linear { x, w, b }, rg)
    }

    /// `a · bᵀ` with `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let [m, k] = dims2(self.shape(a));
        let [n, k2] = dims2(self.shape(b));
        assert_eq!(k, k2);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (1, k), &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out), Op::MatMulNt { a, b }, rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(self.shape(a), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale·x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let t = self.value(x).map(|v| scale * v + offset);
        let rg = self.rg(x);
        self.push(t, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    /// Elementwise binary cross-entropy on logits against fixed targets.
    pub fn bce_logits(&mut self, x: Var, target: Vec<f64>) -> Var {
        assert_eq!(self.value(x).len(), target.len());
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&target)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let t = Tensor::new(self.shape(x), data);
        let rg = self.rg(x);
        self.push(t, Op::BceLogits { x, target }, rg)
    }

    /// Row-wise log-softmax. With `exclude_diag` (square input only) the
    /// diagonal is left out of every normalizer and its output is set to 0.
    pub fn log_softmax_rows(&mut self, x: Var, exclude_diag: bool) -> Var {
        let [r, c] = dims2(self.shape(x));
        if exclude_diag {
            assert_eq!(r, c, "exclude_diag needs a square matrix");
        }
        let v = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let keep = |j: usize| !(exclude_diag && i == j);
            let mx = (0..c).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..c).filter(|&j| keep(j)).map(|j| (row[j] - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                if keep(j) {
                    out[i * c + j] = row[j] - lse;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[r, c], out), Op::LogSoftmaxRows { x, exclude_diag }, rg)
    }

    /// Zero mean, unit variance over everything but the leading (batch) axis.
    pub fn standardize_samples(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let v = self.value(x).data();
        let c = v.len() / shape[0];
        let mut out = vec![0.0; v.len()];
        for (row, o) in v.chunks(c).zip(out.chunks_mut(c)) {
            let m = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / c as f64;
            let s = (var + eps).sqrt();
            for (a, b) in row.iter().zip(o.iter_mut()) {
                *b = (a - m) / s;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out), Op::StandardizeSamples { x, eps }, rg)
    }

    /// Divides each row by `sqrt(‖row‖² + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let [r, c] = dims2(self.shape(x));
        let v = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let n = (row.iter().map(|a| a * a).sum::<f64>() + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[r, c], out), Op::L2NormalizeRows { x, eps }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Global average pool: NCHW → `[N, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let [n, c, h, w] = dims4(self.shape(x));
        let hw = (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().sum::<f64>() / hw)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, c], data), Op::MeanSpatial(x), rg)
    }

    /// Column means: `[m, c]` → `[c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let [m, c] = dims2(self.shape(x));
        let v = self.value(x).data();
        let mut out = vec![0.0; c];
        for row in v.chunks(c) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[c], out), Op::MeanRows(x), rg)
    }

    /// Broadcast row subtraction: `[m, c] − [c]`.
    pub fn sub_row(&mut self, x: Var, r: Var) -> Var {
        let [m, c] = dims2(self.shape(x));
        assert_eq!(self.shape(r), &[c]);
        let rv = self.value(r).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, a) in row.iter_mut().zip(rv) {
                *o -= a;
            }
        }
        let rg = self.rg(x) || self.rg(r);
        self.push(Tensor::new(&[m, c], out), Op::SubRow(x, r), rg)
    }

    /// Per-channel gate: NCHW × `[N, C]`.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Var {
        let [n, c, h, w] = dims4(self.shape(x));
        assert_eq!(self.shape(g), &[n, c]);
        let gv = self.value(g).data();
        let mut out = self.value(x).data().to_vec();
        for (i, ch) in out.chunks_mut(h * w).enumerate() {
            for v in ch {
                *v *= gv[i];
            }
        }
        let rg = self.rg(x) || self.rg(g);
        self.push(Tensor::new(&[n, c, h, w], out), Op::MulChannel(x, g), rg)
    }

    /// Per-location gate: NCHW × `[N, 1, H, W]`.
    pub fn mul_spatial(&mut self, x: Var, s: Var) -> Var {
        let [n, c, h, w] = dims4(self.shape(x));
        assert_eq!(self.shape(s), &[n, 1, h, w]);
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (i, ch) in out.chunks_mut(h * w).enumerate() {
            let m = &sv[(i / c) * h * w..(i / c + 1) * h * w];
            for (v, g) in ch.iter_mut().zip(m) {
                *v *= g;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(Tensor::new(&[n, c, h, w], out), Op::MulSpatial(x, s), rg)
    }

    /// Channel-wise mean and max maps: NCHW → `[N, 2, H, W]`.
    pub fn channel_mean_max(&mut self, x: Var) -> Var {
        let [n, c, h, w] = dims4(self.shape(x));
        let v = self.value(x).data();
        let hw = h * w;
        let mut out = vec![0.0; n * 2 * hw];
        let mut argmax = vec![0; n * hw];
        for ni in 0..n {
            for p in 0..hw {
                let mut s = 0.0;
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for ci in 0..c {
                    let a = v[(ni * c + ci) * hw + p];
                    s += a;
                    if a > best {
                        best = a;
                        arg = ci;
                    }
                }
                out[ni * 2 * hw + p] = s / c as f64;
                out[ni * 2 * hw + hw + p] = best;
                argmax[ni * hw + p] = arg;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, 2, h, w], out), Op::ChannelMeanMax { x, argmax }, rg)
    }

    /// Picks flat elements of `x` into a tensor of the given shape.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Var {
        let v = self.value(x).data();
        let data = idx.iter().map(|&i| v[i]).collect();
        let t = Tensor::new(shape, data);
        let rg = self.rg(x);
        self.push(t, Op::Gather { x, idx }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Stacks tensors along their first dimension.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let tail = self.shape(xs[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            assert_eq!(&self.shape(x)[1..], &tail[..], "concat shape mismatch");
            rows += self.shape(x)[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(Tensor::new(&shape, data), Op::ConcatRows(xs.to_vec()), rg)
    }

    /// Average of NCHW feature cells per region: `(sample, flat cell indices)` → `[M, C]`.
    pub fn pool_regions(&mut self, x: Var, regions: Vec<(usize, Vec<usize>)>) -> Var {
        let [_, c, h, w] = dims4(self.shape(x));
        let v = self.value(x).data();
        let hw = h * w;
        let mut out = vec![0.0; regions.len() * c];
        for (r, (ni, cells)) in regions.iter().enumerate() {
            assert!(!cells.is_empty(), "empty pooling region");
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let s: f64 = cells.iter().map(|&p| v[base + p]).sum();
                out[r * c + ci] = s / cells.len() as f64;
            }
        }
        let rg = self.rg(x);
        let m = regions.len();
        self.push(Tensor::new(&[m, c], out), Op::PoolRegions { x, regions }, rg)
    }

    /// Gradient reversal: identity forward, gradient scaled by `−lambda` backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        let t = self.value(x).clone();
        let rg = self.rg(x);
        self.push(t, Op::Grl { x, lambda }, rg)
    }

    /// Row-wise dot products of two `[m, d]` matrices → `[m]`.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Var {
        let [m, d] = dims2(self.shape(a));
        assert_eq!(self.shape(b), &[m, d]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = (0..m)
            .map(|i| av[i * d..(i + 1) * d].iter().zip(&bv[i * d..(i + 1) * d]).map(|(x, y)| x * y).sum())
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m], data), Op::DotRows(a, b), rg)
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (x, w, stride, pad) = (*x, *w, *stride, *pad);
                let [n, c, h, wd] = dims4(self.shape(x));
                let [o, _, k, _] = dims4(self.shape(w));
                let [_, _, ho, wo] = dims4(node.value.shape());
                let hw = ho * wo;
                let cols_w = n * hw;
                let ckk = c * k * k;
                // dOut rearranged to [O, N·Ho·Wo]
                let mut dout = vec![0.0; o * cols_w];
                for ni in 0..n {
                    for oi in 0..o {
                        dout[oi * cols_w + ni * hw..oi * cols_w + (ni + 1) * hw]
                            .copy_from_slice(&gd[(ni * o + oi) * hw..(ni * o + oi + 1) * hw]);
                    }
                }
                if let Some(b) = b {
                    self.acc(grads, *b, |db| {
                        for oi in 0..o {
                            db[oi] += dout[oi * cols_w..(oi + 1) * cols_w].iter().sum::<f64>();
                        }
                    });
                }
                if self.rg(w) {
                    let (cols, _, _) = im2col(self.value(x).data(), [n, c, h, wd], k, stride, pad);
                    self.acc(grads, w, |dw| {
                        gemm(o, cols_w, ckk, &dout, (cols_w, 1), &cols, (1, cols_w), dw, true);
                    });
                }
                if self.rg(x) {
                    let mut dcols = vec![0.0; ckk * cols_w];
                    gemm(ckk, o, cols_w, self.value(w).data(), (1, ckk), &dout, (cols_w, 1), &mut dcols, false);
                    self.acc(grads, x, |dx| col2im(&dcols, [n, c, h, wd], k, stride, pad, dx));
                }
            }
            Op::Linear { x, w, b } => {
                let [m, i] = dims2(self.shape(*x));
                let [o, _] = dims2(self.shape(*w));
                if let Some(b) = b {
                    self.acc(grads, *b, |db| {
                        for row in gd.chunks(o) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                    });
                }
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                self.acc(grads, *w, |dw| gemm(o, m, i, gd, (1, o), xv, (i, 1), dw, true));
                self.acc(grads, *x, |dx| gemm(m, o, i, gd, (o, 1), wv, (i, 1), dx, true));
            }
            Op::MatMulNt { a, b } => {
                let [m, k] = dims2(self.shape(*a));
                let [n, _] = dims2(self.shape(*b));
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |da| gemm(m, n, k, gd, (n, 1), bv, (k, 1), da, true));
                self.acc(grads, *b, |db| gemm(n, m, k, gd, (1, n), av, (k, 1), db, true));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, gd));
                self.acc(grads, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, gd));
                self.acc(grads, *b, |d| {
                    for (x, y) in d.iter_mut().zip(gd) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |d| {
                    for ((x, y), z) in d.iter_mut().zip(gd).zip(bv) {
                        *x += y * z;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((x, y), z) in d.iter_mut().zip(gd).zip(av) {
                        *x += y * z;
                    }
                });
            }
            Op::Affine { x, scale } => {
                self.acc(grads, *x, |d| {
                    for (a, b) in d.iter_mut().zip(gd) {
                        *a += scale * b;
                    }
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((a, gg), &z) in d.iter_mut().zip(gd).zip(xv) {
                        let s = sigmoid(z);
                        *a += gg * (s + z * s * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid(x) => self.acc(grads, *x, |d| {
                for ((a, gg), s) in d.iter_mut().zip(gd).zip(out) {
                    *a += gg * s * (1.0 - s);
                }
            }),
            Op::Exp(x) => self.acc(grads, *x, |d| {
                for ((a, gg), e) in d.iter_mut().zip(gd).zip(out) {
                    *a += gg * e;
                }
            }),
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((a, gg), z) in d.iter_mut().zip(gd).zip(xv) {
                        *a += 2.0 * gg * z;
                    }
                });
            }
            Op::Sqrt(x) => self.acc(grads, *x, |d| {
                for ((a, gg), s) in d.iter_mut().zip(gd).zip(out) {
                    *a += gg * 0.5 / s;
                }
            }),
            Op::BceLogits { x, target } => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for (i, a) in d.iter_mut().enumerate() {
                        *a += gd[i] * (sigmoid(xv[i]) - target[i]);
                    }
                });
            }
            Op::LogSoftmaxRows { x, exclude_diag } => {
                let [r, c] = dims2(self.shape(*x));
                self.acc(grads, *x, |d| {
                    for i in 0..r {
                        let keep = |j: usize| !(*exclude_diag && i == j);
                        let gs: f64 = (0..c).filter(|&j| keep(j)).map(|j| gd[i * c + j]).sum();
                        for j in 0..c {
                            if keep(j) {
                                let p = out[i * c + j].exp();
                                d[i * c + j] += gd[i * c + j] - p * gs;
                            }
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, eps } => {
                let [r, c] = dims2(self.shape(*x));
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let n = (row.iter().map(|a| a * a).sum::<f64>() + eps).sqrt();
                        let yg: f64 = (0..c).map(|j| out[i * c + j] * gd[i * c + j]).sum();
                        for j in 0..c {
                            d[i * c + j] += (gd[i * c + j] - out[i * c + j] * yg) / n;
                        }
                    }
                });
            }
            Op::StandardizeSamples { x, eps } => {
                let xv = self.value(*x).data();
                let c = xv.len() / self.shape(*x)[0];
                self.acc(grads, *x, |d| {
                    for (i, row) in xv.chunks(c).enumerate() {
                        let m = row.iter().sum::<f64>() / c as f64;
                        let var = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / c as f64;
                        let s = (var + eps).sqrt();
                        let y = &out[i * c..(i + 1) * c];
                        let dy = &gd[i * c..(i + 1) * c];
                        let mdy = dy.iter().sum::<f64>() / c as f64;
                        let mdyy = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[i * c + j] += (dy[j] - mdy - y[j] * mdyy) / s;
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| {
                for a in d.iter_mut() {
                    *a += gd[0];
                }
            }),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.acc(grads, *x, |d| {
                    for a in d.iter_mut() {
                        *a += gd[0] / n;
                    }
                });
            }
            Op::MeanSpatial(x) => {
                let [_, _, h, w] = dims4(self.shape(*x));
                let hw = h * w;
                self.acc(grads, *x, |d| {
                    for (i, ch) in d.chunks_mut(hw).enumerate() {
                        for a in ch {
                            *a += gd[i] / hw as f64;
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let [m, c] = dims2(self.shape(*x));
                self.acc(grads, *x, |d| {
                    for row in d.chunks_mut(c) {
                        for (a, gg) in row.iter_mut().zip(gd) {
                            *a += gg / m as f64;
                        }
                    }
                });
            }
            Op::SubRow(x, r) => {
                let [_, c] = dims2(self.shape(*x));
                self.acc(grads, *x, |d| add_into(d, gd));
                self.acc(grads, *r, |d| {
                    for row in gd.chunks(c) {
                        for (a, gg) in d.iter_mut().zip(row) {
                            *a -= gg;
                        }
                    }
                });
            }
            Op::MulChannel(x, gt) => {
                let [_, _, h, w] = dims4(self.shape(*x));
                let hw = h * w;
                let xv = self.value(*x).data();
                let gv = self.value(*gt).data();
                self.acc(grads, *x, |d| {
                    for (i, ch) in d.chunks_mut(hw).enumerate() {
                        for (a, gg) in ch.iter_mut().zip(&gd[i * hw..(i + 1) * hw]) {
                            *a += gg * gv[i];
                        }
                    }
                });
                self.acc(grads, *gt, |d| {
                    for (i, a) in d.iter_mut().enumerate() {
                        *a += gd[i * hw..(i + 1) * hw]
                            .iter()
                            .zip(&xv[i * hw..(i + 1) * hw])
                            .map(|(p, q)| p * q)
                            .sum::<f64>();
                    }
                });
            }
            Op::MulSpatial(x, s) => {
                let [_, c, h, w] = dims4(self.shape(*x));
                let hw = h * w;
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                self.acc(grads, *x, |d| {
                    for (i, ch) in d.chunks_mut(hw).enumerate() {
                        let m = &sv[(i / c) * hw..(i / c + 1) * hw];
                        for ((a, gg), mm) in ch.iter_mut().zip(&gd[i * hw..(i + 1) * hw]).zip(m) {
                            *a += gg * mm;
                        }
                    }
                });
                self.acc(grads, *s, |d| {
                    for i in 0..gd.len() / hw {
                        let ni = i / c;
                        for p in 0..hw {
                            d[ni * hw + p] += gd[i * hw + p] * xv[i * hw + p];
                        }
                    }
                });
            }
            Op::ChannelMeanMax { x, argmax } => {
                let [n, c, h, w] = dims4(self.shape(*x));
                let hw = h * w;
                self.acc(grads, *x, |d| {
                    for ni in 0..n {
                        for p in 0..hw {
                            let gm = gd[ni * 2 * hw + p] / c as f64;
                            for ci in 0..c {
                                d[(ni * c + ci) * hw + p] += gm;
                            }
                            let a = argmax[ni * hw + p];
                            d[(ni * c + a) * hw + p] += gd[ni * 2 * hw + hw + p];
                        }
                    }
                });
            }
            Op::Gather { x, idx } => self.acc(grads, *x, |d| {
                for (k, &i) in idx.iter().enumerate() {
                    d[i] += gd[k];
                }
            }),
            Op::Reshape(x) => self.acc(grads, *x, |d| add_into(d, gd)),
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    self.acc(grads, x, |d| add_into(d, &gd[off..off + len]));
                    off += len;
                }
            }
            Op::PoolRegions { x, regions } => {
                let [_, c, h, w] = dims4(self.shape(*x));
                let hw = h * w;
                self.acc(grads, *x, |d| {
                    for (r, (ni, cells)) in regions.iter().enumerate() {
                        let inv = 1.0 / cells.len() as f64;
                        for ci in 0..c {
                            let gg = gd[r * c + ci] * inv;
                            let base = (ni * c + ci) * hw;
                            for &p in cells {
                                d[base + p] += gg;
                            }
                        }
                    }
                });
            }
            Op::Grl { x, lambda } => self.acc(grads, *x, |d| {
                for (a, gg) in d.iter_mut().zip(gd) {
                    *a -= lambda * gg;
                }
            }),
            Op::DotRows(a, b) => {
                let [_, dd] = dims2(self.shape(*a));
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |d| {
                    for (k, v) in d.iter_mut().enumerate() {
                        *v += gd[k / dd] * bv[k];
                    }
                });
                self.acc(grads, *b, |d| {
                    for (k, v) in d.iter_mut().enumerate() {
                        *v += gd[k / dd] * av[k];
                    }
                });
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (a, b) in d.iter_mut().zip(g) {
        *a += b;
    }
}
