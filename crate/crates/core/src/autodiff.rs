//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! append nodes in execution order, so the node list is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance floor of the normalization layers.
pub const NORM_EPS: f64 = 1e-5;
/// Probabilities are clamped to this before taking logarithms.
pub const LOG_EPS: f64 = 1e-12;

/// A shape-preserving linear operator with an explicit adjoint. Feature
/// perturbations enter the graph through this trait.
pub trait LinearMap: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    fn adjoint(&self, grad: &Tensor) -> Result<Tensor>;
}

/// Which elements share normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Per channel over N, H, W. Falls back to identity when N < 2.
    Batch,
    /// Per sample over C, H, W.
    Sample,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Scale(Var, f64),
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Relu(Var),
    Normalize {
        x: Var,
        mode: NormMode,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool(Var),
    Flatten(Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var),
    CrossEntropy {
        target: Vec<f64>,
        pred: Var,
        weights: Vec<f64>,
    },
    Sum(Var),
    Map {
        x: Var,
        map: Arc<dyn LinearMap>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

// c[m×n] += a[m×k] · b[k×n]
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * n + j] += s;
        }
    }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let api = a[p * k + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.oh * self.ow;
        for ch in 0..self.c {
            for u in 0..self.k {
                for v in 0..self.k {
                    let row = (ch * self.k + u) * self.k + v;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for y in 0..self.oh {
                        let iy = (y * self.stride + u) as isize - self.pad as isize;
                        for xo in 0..self.ow {
                            let ix = (xo * self.stride + v) as isize - self.pad as isize;
                            dst[y * self.ow + xo] =
                                if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                                    0.0
                                } else {
                                    x[(ch * self.h + iy as usize) * self.w + ix as usize]
                                };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.oh * self.ow;
        for ch in 0..self.c {
            for u in 0..self.k {
                for v in 0..self.k {
                    let row = (ch * self.k + u) * self.k + v;
                    let src = &cols[row * p..(row + 1) * p];
                    for y in 0..self.oh {
                        let iy = (y * self.stride + u) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for xo in 0..self.ow {
                            let ix = (xo * self.stride + v) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            dx[(ch * self.h + iy as usize) * self.w + ix as usize] += src[y * self.ow + xo];
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient after [`Tape::backward`]; `None` for nodes that do
    /// not require a gradient or were not reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears all gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, op: &'static str, value: Tensor, inputs: &[Var], kind: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: kind,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let x = self.value(input);
        let kt = self.value(kernel);
        let [n, c, h, w] = match x.shape() {
            &[n, c, h, w] => [n, c, h, w],
            s => return Err(Error::invalid("conv2d", format!("input must be rank 4, got {s:?}"))),
        };
        let [co, ci, kh, kw] = match kt.shape() {
            &[a, b, c2, d] => [a, b, c2, d],
            s => return Err(Error::invalid("conv2d", format!("kernel must be rank 4, got {s:?}"))),
        };
        if c != ci {
            return Err(Error::shape("conv2d", "input channels (C vs C_in)", ci, c));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", "kernel width (square kernels only)", kh, kw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * pad {
            return Err(Error::shape("conv2d", "kernel height vs padded H", h + 2 * pad, kh));
        }
        if kw > w + 2 * pad {
            return Err(Error::shape("conv2d", "kernel width vs padded W", w + 2 * pad, kw));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite { op: "conv2d" });
        }
        let g = ConvGeom {
            c,
            h,
            w,
            k: kh,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let kk = c * kh * kw;
        let p = g.oh * g.ow;
        let mut cols = vec![0.0; kk * p];
        let mut out = vec![0.0; n * co * p];
        for b in 0..n {
            g.im2col(&x.data()[b * c * h * w..(b + 1) * c * h * w], &mut cols);
            gemm_nn(co, kk, p, kt.data(), &cols, &mut out[b * co * p..(b + 1) * co * p]);
        }
        let value = Tensor::from_raw(vec![n, co, g.oh, g.ow], out);
        self.push(
            "conv2d",
            value,
            &[input, kernel],
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::invalid(
                "add",
                format!("shapes {:?} and {:?} differ", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_raw(ta.shape().to_vec(), data);
        self.push("add", value, &[a, b], Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::from_raw(t.shape().to_vec(), t.data().iter().map(|v| v * k).collect());
        self.push("scale", value, &[x], Op::Scale(x, k))
    }

    /// `y[n, c, ..] = x[n, c, ..] * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims4("channel_affine")?;
        let (s, b) = (self.value(scale), self.value(shift));
        if s.len() != c {
            return Err(Error::shape("channel_affine", "scale length", c, s.len()));
        }
        if b.len() != c {
            return Err(Error::shape("channel_affine", "shift length", c, b.len()));
        }
        let hw = h * w;
        let mut out = vec![0.0; t.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in 0..hw {
                    out[base + j] = t.data()[base + j] * s.data()[ch] + b.data()[ch];
                }
            }
        }
        let value = Tensor::from_raw(t.shape().to_vec(), out);
        self.push(
            "channel_affine",
            value,
            &[x, scale, shift],
            Op::ChannelAffine { x, scale, shift },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::from_raw(t.shape().to_vec(), t.data().iter().map(|&v| v.max(0.0)).collect());
        self.push("relu", value, &[x], Op::Relu(x))
    }

    /// Contiguous index ranges making up each statistics group, or `None`
    /// when normalization degenerates to identity.
    fn norm_groups(mode: NormMode, dims: [usize; 4]) -> Option<Vec<Vec<(usize, usize)>>> {
        let [n, c, h, w] = dims;
        let hw = h * w;
        match mode {
            NormMode::Batch if n < 2 => None,
            NormMode::Batch => Some(
                (0..c)
                    .map(|ch| (0..n).map(|i| ((i * c + ch) * hw, (i * c + ch + 1) * hw)).collect())
                    .collect(),
            ),
            NormMode::Sample => Some((0..n).map(|i| vec![(i * c * hw, (i + 1) * c * hw)]).collect()),
        }
    }

    /// Zero-mean, unit-variance normalization with `NORM_EPS` in the
    /// denominator. No learned parameters; pair with [`Tape::channel_affine`].
    pub fn normalize(&mut self, x: Var, mode: NormMode) -> Result<Var> {
        let t = self.value(x);
        let dims = t.dims4("normalize")?;
        let Some(groups) = Self::norm_groups(mode, dims) else {
            let value = t.clone();
            return self.push(
                "normalize",
                value,
                &[x],
                Op::Normalize {
                    x,
                    mode,
                    xhat: Vec::new(),
                    inv_std: Vec::new(),
                },
            );
        };
        let d = t.data();
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = Vec::with_capacity(groups.len());
        for g in &groups {
            let m = g.iter().map(|(a, b)| b - a).sum::<usize>() as f64;
            let mean = g.iter().map(|&(a, b)| d[a..b].iter().sum::<f64>()).sum::<f64>() / m;
            let var = g
                .iter()
                .map(|&(a, b)| d[a..b].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                .sum::<f64>()
                / m;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            for &(a, b) in g {
                for i in a..b {
                    xhat[i] = (d[i] - mean) * is;
                }
            }
            inv_std.push(is);
        }
        let value = Tensor::from_raw(t.shape().to_vec(), xhat.clone());
        self.push("normalize", value, &[x], Op::Normalize { x, mode, xhat, inv_std })
    }

    /// N×C×H×W → N×C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = match t.shape() {
            &[n, c, h, w] => [n, c, h, w],
            s => return Err(Error::invalid("global_avg_pool", format!("expected rank 4, got {s:?}"))),
        };
        let hw = h * w;
        let out = t
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::from_raw(vec![n, c], out);
        self.push("global_avg_pool", value, &[x], Op::GlobalAvgPool(x))
    }

    /// Collapses all trailing extents: N×… → N×D.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let d = t.len() / n;
        let value = Tensor::from_raw(vec![n, d], t.data().to_vec());
        self.push("flatten", value, &[x], Op::Flatten(x))
    }

    /// `y = x · weightᵀ + bias` with x N×D, weight C×D, bias C.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let (wt, bt) = (self.value(weight), self.value(bias));
        let (n, d) = match t.shape() {
            &[n, d] => (n, d),
            s => return Err(Error::invalid("linear", format!("input must be rank 2, got {s:?}"))),
        };
        let (c, wd) = match wt.shape() {
            &[c, wd] => (c, wd),
            s => return Err(Error::invalid("linear", format!("weight must be rank 2, got {s:?}"))),
        };
        if wd != d {
            return Err(Error::shape("linear", "input features", wd, d));
        }
        if bt.len() != c {
            return Err(Error::shape("linear", "bias length", c, bt.len()));
        }
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            out[i * c..(i + 1) * c].copy_from_slice(bt.data());
        }
        gemm_nt(n, d, c, t.data(), wt.data(), &mut out);
        let value = Tensor::from_raw(vec![n, c], out);
        self.push("linear", value, &[x, weight, bias], Op::Linear { x, weight, bias })
    }

    /// Softmax over the class axis of an N×C tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = match t.shape() {
            &[_, c] => c,
            s => return Err(Error::invalid("softmax", format!("expected N×C, got {s:?}"))),
        };
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.into_iter().map(|v| v / s));
        }
        let value = Tensor::from_raw(t.shape().to_vec(), out);
        self.push("softmax", value, &[x], Op::Softmax(x))
    }

    /// `Σ_i weights[i] · (−Σ_c target[i,c] · ln max(pred[i,c], LOG_EPS))`.
    ///
    /// `target` is N×C (one-hot or soft), `pred` an N×C probability node.
    /// Use `weights = 1/N` for a batch mean.
    pub fn cross_entropy(&mut self, target: &Tensor, pred: Var, weights: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        let (n, c) = match p.shape() {
            &[n, c] => (n, c),
            s => return Err(Error::invalid("cross_entropy", format!("pred must be N×C, got {s:?}"))),
        };
        if target.shape() != p.shape() {
            let found = target.shape().last().copied().unwrap_or(0);
            if target.len() / found.max(1) == n {
                return Err(Error::shape("cross_entropy", "classes", c, found));
            }
            return Err(Error::shape("cross_entropy", "rows", n, target.len() / c.max(1)));
        }
        if weights.len() != n {
            return Err(Error::shape("cross_entropy", "weights", n, weights.len()));
        }
        let mut total = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..c {
                let t = target.data()[i * c + j];
                if t != 0.0 {
                    row -= t * p.data()[i * c + j].max(LOG_EPS).ln();
                }
            }
            total += weights[i] * row;
        }
        let value = Tensor::scalar(total);
        self.push(
            "cross_entropy",
            value,
            &[pred],
            Op::CrossEntropy {
                target: target.data().to_vec(),
                pred,
                weights: weights.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn map(&mut self, x: Var, map: Arc<dyn LinearMap>) -> Result<Var> {
        let value = map.apply(self.value(x))?;
        if value.shape() != self.value(x).shape() {
            return Err(Error::invalid("map", format!("{} changed the shape", map.name())));
        }
        self.push(map.name(), value, &[x], Op::Map { x, map })
    }

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("called twice without zero_grad".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Backward(
                "loss does not depend on any tensor requiring grad".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
            self.nodes[idx].grad = Some(g);
        }
        for n in &self.nodes {
            if let Some(g) = &n.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let x = self.value(*input);
                let kt = self.value(*kernel);
                let [n, c, h, w] = x.dims4("conv2d")?;
                let [co, _, k, _] = kt.dims4("conv2d")?;
                let geom = ConvGeom {
                    c,
                    h,
                    w,
                    k,
                    stride: *stride,
                    pad: *pad,
                    oh: node.value.shape()[2],
                    ow: node.value.shape()[3],
                };
                let kk = c * k * k;
                let p = geom.oh * geom.ow;
                let mut cols = vec![0.0; kk * p];
                let mut dk = vec![0.0; kt.len()];
                let mut dx = vec![0.0; x.len()];
                let mut dcols = vec![0.0; kk * p];
                for b in 0..n {
                    let go = &g[b * co * p..(b + 1) * co * p];
                    let xs = &x.data()[b * c * h * w..(b + 1) * c * h * w];
                    if self.wants(*kernel) {
                        geom.im2col(xs, &mut cols);
                        gemm_nt(co, p, kk, go, &cols, &mut dk);
                    }
                    if self.wants(*input) {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        gemm_tn(co, kk, p, kt.data(), go, &mut dcols);
                        geom.col2im(&dcols, &mut dx[b * c * h * w..(b + 1) * c * h * w]);
                    }
                }
                if self.wants(*kernel) {
                    add_into(&mut grads[kernel.0], &dk);
                }
                if self.wants(*input) {
                    add_into(&mut grads[input.0], &dx);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Scale(x, k) => {
                if self.wants(*x) {
                    let d: Vec<f64> = g.iter().map(|v| v * k).collect();
                    add_into(&mut grads[x.0], &d);
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let t = self.value(*x);
                let [n, c, h, w] = t.dims4("channel_affine")?;
                let hw = h * w;
                let s = self.value(*scale).data();
                let mut dx = vec![0.0; t.len()];
                let mut ds = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in 0..hw {
                            let gv = g[base + j];
                            dx[base + j] = gv * s[ch];
                            ds[ch] += gv * t.data()[base + j];
                            db[ch] += gv;
                        }
                    }
                }
                if self.wants(*x) {
                    add_into(&mut grads[x.0], &dx);
                }
                if self.wants(*scale) {
                    add_into(&mut grads[scale.0], &ds);
                }
                if self.wants(*shift) {
                    add_into(&mut grads[shift.0], &db);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let t = self.value(*x).data();
                    let d: Vec<f64> = g
                        .iter()
                        .zip(t)
                        .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                        .collect();
                    add_into(&mut grads[x.0], &d);
                }
            }
            Op::Normalize { x, mode, xhat, inv_std } => {
                if !self.wants(*x) {
                    return Ok(());
                }
                let dims = self.value(*x).dims4("normalize")?;
                let Some(groups) = Self::norm_groups(*mode, dims) else {
                    add_into(&mut grads[x.0], g);
                    return Ok(());
                };
                let mut dx = vec![0.0; g.len()];
                for (gi, grp) in groups.iter().enumerate() {
                    let m = grp.iter().map(|(a, b)| b - a).sum::<usize>() as f64;
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for &(a, b) in grp {
                        for i in a..b {
                            sum_g += g[i];
                            sum_gx += g[i] * xhat[i];
                        }
                    }
                    for &(a, b) in grp {
                        for i in a..b {
                            dx[i] = inv_std[gi] / m * (m * g[i] - sum_g - xhat[i] * sum_gx);
                        }
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::GlobalAvgPool(x) => {
                if self.wants(*x) {
                    let [_, _, h, w] = self.value(*x).dims4("global_avg_pool")?;
                    let hw = h * w;
                    let d: Vec<f64> = g
                        .iter()
                        .flat_map(|gv| std::iter::repeat_n(gv / hw as f64, hw))
                        .collect();
                    add_into(&mut grads[x.0], &d);
                }
            }
            Op::Flatten(x) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::Linear { x, weight, bias } => {
                let t = self.value(*x);
                let wt = self.value(*weight);
                let (n, d) = (t.shape()[0], t.shape()[1]);
                let c = wt.shape()[0];
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * d];
                    gemm_nn(n, c, d, g, wt.data(), &mut dx);
                    add_into(&mut grads[x.0], &dx);
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0; c * d];
                    gemm_tn(n, c, d, g, t.data(), &mut dw);
                    add_into(&mut grads[weight.0], &dw);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (a, b) in db.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    add_into(&mut grads[bias.0], &db);
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let c = node.value.shape()[1];
                    let mut dx = vec![0.0; g.len()];
                    for ((drow, grow), prow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(node.value.data().chunks(c)) {
                        let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            drow[j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::CrossEntropy { target, pred, weights } => {
                if self.wants(*pred) {
                    let p = self.value(*pred);
                    let c = p.shape()[1];
                    let mut dp = vec![0.0; p.len()];
                    for (i, wi) in weights.iter().enumerate() {
                        for j in 0..c {
                            let k = i * c + j;
                            let pv = p.data()[k];
                            if target[k] != 0.0 && pv > LOG_EPS {
                                dp[k] = -g[0] * wi * target[k] / pv;
                            }
                        }
                    }
                    add_into(&mut grads[pred.0], &dp);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let d = vec![g[0]; self.value(*x).len()];
                    add_into(&mut grads[x.0], &d);
                }
            }
            Op::Map { x, map } => {
                if self.wants(*x) {
                    let gt = Tensor::from_raw(node.value.shape().to_vec(), g.to_vec());
                    let d = map.adjoint(&gt)?;
                    add_into(&mut grads[x.0], d.data());
                }
            }
        }
        Ok(())
    }
}

/// Per-parameter outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: usize,
    /// ‖g_tape − g_fd‖₂ / max(‖g_tape‖₂, ‖g_fd‖₂); zero when both vanish.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

fn eval_scalar<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::invalid("grad_check", "function must return a scalar"));
    }
    Ok(v.data()[0])
}

/// Compares tape gradients of the scalar function `f` against central finite
/// differences with the given `step`. Every parameter coordinate is probed.
pub fn grad_check<F>(params: &[Tensor], f: F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let first = eval_scalar(&f, params)?;
    let second = eval_scalar(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(format!("{first} vs {second}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut entries = Vec::with_capacity(params.len());
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; params[pi].len()]);
        let mut numeric = Vec::with_capacity(params[pi].len());
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            probe[pi].data_mut()[j] = orig + step;
            let up = eval_scalar(&f, &probe)?;
            probe[pi].data_mut()[j] = orig - step;
            let down = eval_scalar(&f, &probe)?;
            probe[pi].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel_error = if denom < 1e-12 { diff } else { diff / denom };
        let max_abs_error = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        entries.push(GradCheckEntry {
            param: pi,
            rel_error,
            max_abs_error,
        });
    }
    let passed = entries.iter().all(|e| e.rel_error <= tol);
    Ok(GradCheckReport { entries, tol, passed })
}
