//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation as a node. Parameters are borrowed
//! into the tape rather than copied, so a forward pass over a trained model
//! costs no parameter clones. [`Tape::backward`] walks the nodes in reverse
//! and returns the gradient of a scalar output with respect to every node
//! that depends on a parameter.

use crate::math;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use crate::tensor::gemm;
use crate::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Deref for Value<'_> {
    type Target = Tensor;
    fn deref(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2(Var),
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    AddColBias(Var, Var),
    AddRowBias(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    SpatialMean(Var),
    SampleRows(Var, usize),
    MeanRows(Var),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    SumSquares(Var),
    Mean(Var),
    BceWithLogits(Var, Vec<f64>),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Takes the gradient out, leaving `None`; a missing gradient (the
    /// output does not depend on `v`) is returned as zeros of `like`'s shape.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds `x` (`[Ci, N, H, W]`) into `[Ci*k*k, N*Ho*Wo]`.
fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let (ci, n, h, w) = x.dims4();
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let m = n * ho * wo;
    let mut cols = vec![0.0; ci * k * k * m];
    let xd = x.data();
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * m;
                for ni in 0..n {
                    let src = (c * n + ni) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = row + (ni * ho + oy) * wo;
                        let src_row = src + iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cols[dst + ox] = xd[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: scatters `[Ci*k*k, N*Ho*Wo]` back onto `[Ci, N, H, W]`.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    ci: usize,
    n: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let m = n * ho * wo;
    let mut out = vec![0.0; ci * n * h * w];
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * m;
                for ni in 0..n {
                    let dst = (c * n + ni) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = row + (ni * ho + oy) * wo;
                        let dst_row = dst + iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                out[dst_row + ix as usize] += cols[src + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input borrowed for the tape's lifetime.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input owned by the tape.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise operands differ in shape");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// 2-D convolution of a `[Ci, N, H, W]` map with `[Co, Ci, k, k]` weights
    /// and optional `[Co]` bias, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xt = self.value(x);
        let wt = self.value(w);
        let (ci, n, h, wd) = xt.dims4();
        let ws = wt.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [Co, Ci, k, k]");
        assert_eq!(ws[1], ci, "conv input channels");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let (co, k) = (ws[0], ws[2]);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "kernel larger than input");
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let m = n * ho * wo;
        let mut out = vec![0.0; co * m];
        if is_pointwise(k, stride, pad) {
            gemm(co, ci, m, wt.data(), false, xt.data(), false, &mut out, false);
        } else {
            let (cols, _, _) = im2col(xt, k, stride, pad);
            gemm(co, ci * k * k, m, wt.data(), false, &cols, false, &mut out, false);
        }
        if let Some(b) = b {
            let bt = self.value(b);
            assert_eq!(bt.len(), co, "conv bias length");
            for (row, &bv) in out.chunks_mut(m).zip(bt.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::from_vec(&[co, n, ho, wo], out).expect("conv shape");
        self.push(t, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    /// Nearest-neighbour 2x upsampling of a `[C, N, H, W]` map.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (c, n, h, w) = xt.dims4();
        let (h2, w2) = (2 * h, 2 * w);
        let xd = xt.data();
        let mut out = vec![0.0; c * n * h2 * w2];
        for plane in 0..c * n {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(plane * h2 + y) * w2 + xx] = xd[(plane * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        let t = Tensor::from_vec(&[c, n, h2, w2], out).expect("upsample shape");
        self.push(t, Op::Upsample2(x), rg)
    }

    /// Adds `bias[c, n]` to every spatial position of plane `(c, n)`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let xt = self.value(x);
        let bt = self.value(bias);
        let (c, n, h, w) = xt.dims4();
        assert_eq!(bt.shape(), &[c, n], "channel bias must be [C, N]");
        let mut out = xt.data().to_vec();
        for (plane, &bv) in out.chunks_mut(h * w).zip(bt.data()) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.rg(x) || self.rg(bias);
        let t = Tensor::from_vec(xt.shape(), out).expect("same shape");
        self.push(t, Op::AddChannelBias(x, bias), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = self
            .value(a)
            .matmul(self.value(b))
            .expect("matmul operand shapes");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::MatMul(a, b), rg)
    }

    /// `x[i, j] + b[i]`.
    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Var {
        let xt = self.value(x);
        let (m, n) = xt.dims2();
        let bt = self.value(b);
        assert_eq!(bt.len(), m, "column bias length");
        let mut out = xt.data().to_vec();
        for (row, &bv) in out.chunks_mut(n).zip(bt.data()) {
            row.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.rg(x) || self.rg(b);
        let t = Tensor::from_vec(&[m, n], out).expect("same shape");
        self.push(t, Op::AddColBias(x, b), rg)
    }

    /// `x[i, j] + b[j]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let xt = self.value(x);
        let (m, n) = xt.dims2();
        let bt = self.value(b);
        assert_eq!(bt.len(), n, "row bias length");
        let mut out = xt.data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bt.data()).for_each(|(v, bv)| *v += bv);
        }
        let rg = self.rg(x) || self.rg(b);
        let t = Tensor::from_vec(&[m, n], out).expect("same shape");
        self.push(t, Op::AddRowBias(x, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let at = self.value(a);
        let (m, n) = at.dims2();
        let mut out = at.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = math::exp(*v - mx);
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(a);
        let t = Tensor::from_vec(&[m, n], out).expect("same shape");
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    /// Global average pool: `[C, N, H, W] -> [C, N]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (c, n, h, w) = xt.dims4();
        let hw = (h * w) as f64;
        let out = xt.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        let rg = self.rg(x);
        let t = Tensor::from_vec(&[c, n], out).expect("pool shape");
        self.push(t, Op::SpatialMean(x), rg)
    }

    /// Sample `n` of a `[C, N, H, W]` map as an `[H*W, C]` matrix (one row per
    /// spatial position, row-major over `(y, x)`).
    pub fn sample_rows(&mut self, x: Var, n: usize) -> Var {
        let xt = self.value(x);
        let (c, nn, h, w) = xt.dims4();
        assert!(n < nn, "sample index out of range");
        let hw = h * w;
        let xd = xt.data();
        let mut out = vec![0.0; hw * c];
        for ci in 0..c {
            let plane = &xd[(ci * nn + n) * hw..(ci * nn + n + 1) * hw];
            for (p, &v) in plane.iter().enumerate() {
                out[p * c + ci] = v;
            }
        }
        let rg = self.rg(x);
        let t = Tensor::from_vec(&[hw, c], out).expect("rows shape");
        self.push(t, Op::SampleRows(x, n), rg)
    }

    /// Column means: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let at = self.value(a);
        let (m, n) = at.dims2();
        let mut out = vec![0.0; n];
        for row in at.data().chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(a);
        let t = Tensor::from_vec(&[1, n], out).expect("mean shape");
        self.push(t, Op::MeanRows(a), rg)
    }

    /// Concatenates rank-2 tensors along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        assert!(axis < 2, "concat axis must be 0 or 1");
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.value(p).dims2()).collect();
        let t = if axis == 0 {
            let cols = dims[0].1;
            assert!(dims.iter().all(|d| d.1 == cols), "concat rows: column mismatch");
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
            Tensor::from_vec(&[rows, cols], out).expect("concat shape")
        } else {
            let rows = dims[0].0;
            assert!(dims.iter().all(|d| d.0 == rows), "concat cols: row mismatch");
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for (&p, d) in parts.iter().zip(&dims) {
                    out.extend_from_slice(&self.value(p).data()[r * d.1..(r + 1) * d.1]);
                }
            }
            Tensor::from_vec(&[rows, cols], out).expect("concat shape")
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(t, Op::Concat(parts.to_vec(), axis), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape size");
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// `sum(a^2)` as a one-element tensor.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumSquares(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), labels.len(), "one label per logit");
        let n = labels.len() as f64;
        let s: f64 = z
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + math::ln_1p(math::exp(-z.abs())))
            .sum();
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(s / n),
            Op::BceWithLogits(logits, labels.to_vec()),
            rg,
        )
    }

    /// Gradients of the one-element `output` with respect to every node that
    /// depends on a differentiable input.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match (&node.op, &grads[i]) {
                (Op::Leaf, _) | (_, None) => continue,
                (_, Some(_)) => grads[i].take().expect("checked"),
            };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &*self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let ga = zip(g, self.value(b), |g, y| g * y);
                    self.accumulate(grads, a, ga);
                }
                if self.rg(b) {
                    let gb = zip(g, self.value(a), |g, x| g * x);
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.map(|v| v * s)),
            &Op::Silu(a) => {
                let ga = zip(g, self.value(a), |g, x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                });
                self.accumulate(grads, a, ga);
            }
            &Op::Sigmoid(a) => {
                let ga = zip(g, out, |g, y| g * y * (1.0 - y));
                self.accumulate(grads, a, ga);
            }
            &Op::Conv2d { x, w, b, stride, pad } => {
                let xt = self.value(x);
                let wt = self.value(w);
                let (ci, n, h, wd) = xt.dims4();
                let (co, k) = (wt.shape()[0], wt.shape()[2]);
                let m = g.len() / co;
                let pointwise = is_pointwise(k, stride, pad);
                if let Some(b) = b {
                    if self.rg(b) {
                        let gb = g.data().chunks(m).map(|r| r.iter().sum()).collect();
                        self.accumulate(grads, b, Tensor::from_vec(&[co], gb).expect("bias"));
                    }
                }
                if self.rg(w) {
                    let mut gw = vec![0.0; co * ci * k * k];
                    if pointwise {
                        gemm(co, m, ci, g.data(), false, xt.data(), true, &mut gw, false);
                    } else {
                        let (cols, _, _) = im2col(xt, k, stride, pad);
                        gemm(co, m, ci * k * k, g.data(), false, &cols, true, &mut gw, false);
                    }
                    self.accumulate(grads, w, Tensor::from_vec(wt.shape(), gw).expect("w"));
                }
                if self.rg(x) {
                    let mut dcols = vec![0.0; ci * k * k * m];
                    gemm(ci * k * k, co, m, wt.data(), true, g.data(), false, &mut dcols, false);
                    let gx = if pointwise {
                        dcols
                    } else {
                        col2im(&dcols, ci, n, h, wd, k, stride, pad)
                    };
                    self.accumulate(grads, x, Tensor::from_vec(xt.shape(), gx).expect("x"));
                }
            }
            &Op::Upsample2(x) => {
                let (c, n, h, w) = self.value(x).dims4();
                let (h2, w2) = (2 * h, 2 * w);
                let gd = g.data();
                let mut gx = vec![0.0; c * n * h * w];
                for plane in 0..c * n {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            gx[(plane * h + y / 2) * w + xx / 2] += gd[(plane * h2 + y) * w2 + xx];
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::from_vec(&[c, n, h, w], gx).expect("up"));
            }
            &Op::AddChannelBias(x, bias) => {
                self.accumulate(grads, x, g.clone());
                if self.rg(bias) {
                    let (c, n, h, w) = g.dims4();
                    let gb = g.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                    self.accumulate(grads, bias, Tensor::from_vec(&[c, n], gb).expect("cb"));
                }
            }
            &Op::MatMul(a, b) => {
                let (at, bt) = (self.value(a), self.value(b));
                let (m, k) = at.dims2();
                let n = bt.dims2().1;
                if self.rg(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bt.data(), true, &mut ga, false);
                    self.accumulate(grads, a, Tensor::from_vec(&[m, k], ga).expect("ga"));
                }
                if self.rg(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, at.data(), true, g.data(), false, &mut gb, false);
                    self.accumulate(grads, b, Tensor::from_vec(&[k, n], gb).expect("gb"));
                }
            }
            &Op::AddColBias(x, b) => {
                self.accumulate(grads, x, g.clone());
                if self.rg(b) {
                    let (m, n) = g.dims2();
                    let gb = g.data().chunks(n).map(|r| r.iter().sum()).collect();
                    self.accumulate(grads, b, Tensor::from_vec(&[m], gb).expect("colb"));
                }
            }
            &Op::AddRowBias(x, b) => {
                self.accumulate(grads, x, g.clone());
                if self.rg(b) {
                    let (_, n) = g.dims2();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    let shape = self.value(b).shape().to_vec();
                    self.accumulate(grads, b, Tensor::from_vec(&shape, gb).expect("rowb"));
                }
            }
            &Op::Transpose(a) => self.accumulate(grads, a, g.transpose()),
            &Op::SoftmaxRows(a) => {
                let (_, n) = out.dims2();
                let mut ga = vec![0.0; out.len()];
                for ((grow, yrow), orow) in g
                    .data()
                    .chunks(n)
                    .zip(out.data().chunks(n))
                    .zip(ga.chunks_mut(n))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o = y * (g - dot);
                    }
                }
                self.accumulate(grads, a, Tensor::from_vec(out.shape(), ga).expect("sm"));
            }
            &Op::SpatialMean(x) => {
                let xs = self.value(x).shape().to_vec();
                let hw = xs[2] * xs[3];
                let mut gx = Vec::with_capacity(xs.iter().product());
                for &gv in g.data() {
                    gx.extend(core::iter::repeat_n(gv / hw as f64, hw));
                }
                self.accumulate(grads, x, Tensor::from_vec(&xs, gx).expect("pool"));
            }
            &Op::SampleRows(x, n) => {
                let xs = self.value(x).shape().to_vec();
                let (c, nn, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut gx = vec![0.0; xs.iter().product()];
                for ci in 0..c {
                    for p in 0..hw {
                        gx[(ci * nn + n) * hw + p] = g.data()[p * c + ci];
                    }
                }
                self.accumulate(grads, x, Tensor::from_vec(&xs, gx).expect("rows"));
            }
            &Op::MeanRows(a) => {
                let (m, n) = self.value(a).dims2();
                let mut ga = Vec::with_capacity(m * n);
                for _ in 0..m {
                    ga.extend(g.data().iter().map(|v| v / m as f64));
                }
                self.accumulate(grads, a, Tensor::from_vec(&[m, n], ga).expect("meanrows"));
            }
            Op::Concat(parts, axis) => {
                let (rows, cols) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).dims2();
                    if self.rg(p) {
                        let gp = if *axis == 0 {
                            g.data()[offset * cols..(offset + pr) * cols].to_vec()
                        } else {
                            let mut v = Vec::with_capacity(pr * pc);
                            for r in 0..rows {
                                v.extend_from_slice(&g.data()[r * cols + offset..r * cols + offset + pc]);
                            }
                            v
                        };
                        self.accumulate(grads, p, Tensor::from_vec(&[pr, pc], gp).expect("cat"));
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            &Op::Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                self.accumulate(grads, a, g.clone().reshape(&shape).expect("reshape"));
            }
            &Op::SumSquares(a) => {
                let s = 2.0 * g.data()[0];
                self.accumulate(grads, a, self.value(a).map(|v| s * v));
            }
            &Op::Mean(a) => {
                let t = self.value(a);
                let s = g.data()[0] / t.len() as f64;
                self.accumulate(grads, a, Tensor::full(t.shape(), s));
            }
            Op::BceWithLogits(z, labels) => {
                let zt = self.value(*z);
                let s = g.data()[0] / labels.len() as f64;
                let gz = zt
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| s * (sigmoid(z) - y))
                    .collect();
                self.accumulate(grads, *z, Tensor::from_vec(zt.shape(), gz).expect("bce"));
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_loop() {
        let (ci, n, h, w, co, k) = (2, 2, 5, 4, 3, 3);
        let x = Tensor::from_vec(
            &[ci, n, h, w],
            (0..ci * n * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect(),
        )
        .unwrap();
        let wt = Tensor::from_vec(
            &[co, ci, k, k],
            (0..co * ci * k * k).map(|i| ((i * 5) % 7) as f64 * 0.1).collect(),
        )
        .unwrap();
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(wt.clone());
            let y = tape.conv2d(xv, wv, None, stride, pad);
            let yt = tape.value(y);
            let (_, _, ho, wo) = yt.dims4();
            for o in 0..co {
                for ni in 0..n {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut s = 0.0;
                            for c in 0..ci {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                            s += wt.data()[((o * ci + c) * k + ky) * k + kx]
                                                * x.data()[((c * n + ni) * h + iy as usize) * w + ix as usize];
                                        }
                                    }
                                }
                            }
                            let got = yt.data()[((o * n + ni) * ho + oy) * wo + ox];
                            assert!((got - s).abs() < 1e-12, "stride {stride} pad {pad}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_with_huge_logits() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(&[2, 3], vec![1e6, 0.0, -1e6, 3.0, 3.0, 3.0]).unwrap());
        let s = tape.softmax_rows(a);
        let d = tape.value(s).data();
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert!((d[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let p = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let pv = tape.param(&p);
        let m = tape.mul(c, pv);
        let loss = tape.sum_squares(m);
        let grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        // d/dp sum (c p)^2 = 2 c^2 p
        assert_eq!(grads.get(pv).unwrap().data(), &[18.0, 64.0]);
    }
}
