//! Define-by-run reverse-mode differentiation over a fixed set of tensor primitives.
//!
//! Every primitive appends one node to the tape. Node indices are a topological order by
//! construction, so [`Graph::backward`] walks them once in reverse.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, normal_cdf, normal_pdf};
use crate::numerics::{ParamStore, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;
const L2_NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    AddBias(Var, Var),
    MulScalar(Var, Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Depthwise(Var, Var),
    PixelUnshuffle(Var, usize),
    PixelShuffle(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    SpatialMean(Var),
    L2NormalizeRows {
        x: Var,
        inv_norm: Vec<T>,
    },
    /// Zero-pad or crop at the bottom/right; the gradient copies back the overlapping window.
    Window(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    frozen: Vec<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: Vec::new(),
        }
    }

    /// Parameters whose name starts with `prefix` enter the graph as constants.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen.push(prefix.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter from `store`, reusing the node if already bound.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?
            .clone();
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(t, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Makes later `param(_, name)` calls resolve to `v`.
    pub fn bind_param(&mut self, name: &str, v: Var) {
        self.params.insert(name.to_string(), v);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(Error::dim("matmul", format!("{ad:?} x {bd:?}")));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let d = self.dims(a);
        if d.len() != 2 {
            return Err(Error::dim("transpose", format!("{d:?} is not a matrix")));
        }
        let (r, c) = (d[0], d[1]);
        let out = kernels::transpose(self.value(a).data(), r, c);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), ng))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::dim(op, format!("{:?} vs {:?}", ta.dims(), tb.dims())));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.dims().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|v| v + c);
        let ng = self.ng(a);
        self.push(t, Op::AddConst(a), ng)
    }

    /// `x[..., j] + b[j]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = *tx.dims().last().unwrap_or(&0);
        if tb.len() != n {
            return Err(Error::dim("add_bias", format!("{:?} + {:?}", tx.dims(), tb.dims())));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % n])
            .collect();
        let t = Tensor::new(tx.dims().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(t, Op::AddBias(x, b), ng))
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("mul_scalar", format!("scale {:?}", self.dims(s))));
        }
        let sv = self.value(s).data()[0];
        let t = self.value(x).map(|v| v * sv);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(t, Op::MulScalar(x, s), ng))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.abs());
        let ng = self.ng(a);
        self.push(t, Op::Abs(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(t, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::scalar(ta.sum() / T::lit(ta.len() as f64));
        let ng = self.ng(a);
        self.push(t, Op::Mean(a), ng)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * normal_cdf(x));
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = *ta.dims().last().unwrap_or(&0);
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let t = Tensor::new(ta.dims().to_vec(), out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Softmax(a), ng))
    }

    /// Normalizes over axis 0 (channels) independently at every remaining position, then applies
    /// `scale[c] * xhat + shift[c]`.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.dims()[0];
        if c < 2 {
            return Err(Error::dim("layer_norm", format!("channel extent {c} < 2")));
        }
        if self.value(scale).len() != c || self.value(shift).len() != c {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "{c} channels, scale {:?}, shift {:?}",
                    self.dims(scale),
                    self.dims(shift)
                ),
            ));
        }
        let p = tx.len() / c;
        let xs = tx.data();
        let cf = T::lit(c as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut mean = vec![T::zero(); p];
        for ch in 0..c {
            for (m, &v) in mean.iter_mut().zip(&xs[ch * p..(ch + 1) * p]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= cf);
        let mut var = vec![T::zero(); p];
        for ch in 0..c {
            for ((s, &v), &m) in var.iter_mut().zip(&xs[ch * p..(ch + 1) * p]).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&s| (s / cf + eps).sqrt().recip()).collect();
        let mut normalized = vec![T::zero(); tx.len()];
        for ch in 0..c {
            for i in 0..p {
                normalized[ch * p + i] = (xs[ch * p + i] - mean[i]) * inv_std[i];
            }
        }
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut out = normalized.clone();
        for ch in 0..c {
            for v in &mut out[ch * p..(ch + 1) * p] {
                *v = *v * sc[ch] + sh[ch];
            }
        }
        let t = Tensor::new(tx.dims().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(scale) || self.ng(shift);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std,
            },
            ng,
        ))
    }

    /// Per-channel 3x3 convolution, zero padded; `x` is `(c, h, w)`, `kernel` is `(c, 3, 3)`.
    pub fn depthwise3x3(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xd, kd) = (self.dims(x), self.dims(kernel));
        if xd.len() != 3 || kd != [xd[0], 3, 3] {
            return Err(Error::dim("depthwise3x3", format!("{xd:?} with kernel {kd:?}")));
        }
        let (c, h, w) = (xd[0], xd[1], xd[2]);
        let out = kernels::depthwise3x3(self.value(x).data(), self.value(kernel).data(), c, h, w);
        let ng = self.ng(x) || self.ng(kernel);
        Ok(self.push(Tensor::new(vec![c, h, w], out)?, Op::Depthwise(x, kernel), ng))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let xd = self.dims(x);
        if xd.len() != 3 || r == 0 || !xd[1].is_multiple_of(r) || !xd[2].is_multiple_of(r) {
            return Err(Error::dim("pixel_unshuffle", format!("{xd:?} by factor {r}")));
        }
        let (c, h, w) = (xd[0], xd[1], xd[2]);
        let out = kernels::pixel_unshuffle(self.value(x).data(), c, h, w, r);
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![c * r * r, h / r, w / r], out)?,
            Op::PixelUnshuffle(x, r),
            ng,
        ))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let xd = self.dims(x);
        if xd.len() != 3 || r == 0 || !xd[0].is_multiple_of(r * r) {
            return Err(Error::dim("pixel_shuffle", format!("{xd:?} by factor {r}")));
        }
        let (c, h, w) = (xd[0], xd[1], xd[2]);
        let out = kernels::pixel_shuffle(self.value(x).data(), c, h, w, r);
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![c / (r * r), h * r, w * r], out)?,
            Op::PixelShuffle(x, r),
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(dims)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let tail = self.dims(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let d = self.dims(p);
            if d[1..] != tail[..] {
                return Err(Error::dim("concat", format!("{d:?} vs trailing {tail:?}")));
            }
            lead += d[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut dims = vec![lead];
        dims.extend_from_slice(&tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(dims, data)?, Op::Concat(parts.to_vec()), ng))
    }

    /// Slice `start..start + len` along axis 0.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if len == 0 || start + len > xd[0] {
            return Err(Error::dim("narrow", format!("{start}+{len} of {xd:?}")));
        }
        let stride: usize = xd[1..].iter().product();
        let data = self.value(x).data()[start * stride..(start + len) * stride].to_vec();
        let mut dims = xd;
        dims[0] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(dims, data)?, Op::Narrow { x, start }, ng))
    }

    /// Global average pool: `(c, ...) -> (c)`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.dims()[0];
        let p = tx.len() / c;
        let pf = T::lit(p as f64);
        let data: Vec<T> = tx
            .data()
            .chunks(p)
            .map(|ch| ch.iter().copied().sum::<T>() / pf)
            .collect();
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![c], data).expect("pool dims"),
            Op::SpatialMean(x),
            ng,
        )
    }

    /// Divides every row of a matrix by its L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::dim("l2_normalize_rows", format!("{:?}", tx.dims())));
        }
        let n = tx.dims()[1];
        let eps = T::lit(L2_NORM_EPS);
        let inv_norm: Vec<T> = tx
            .data()
            .chunks(n)
            .map(|r| (r.iter().map(|&v| v * v).sum::<T>() + eps).sqrt().recip())
            .collect();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * inv_norm[i / n])
            .collect();
        let t = Tensor::new(tx.dims().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::L2NormalizeRows { x, inv_norm }, ng))
    }

    /// Zero-pads a `(c, h, w)` map at the bottom and right to `(c, h_to, w_to)`.
    pub fn pad(&mut self, x: Var, h_to: usize, w_to: usize) -> Result<Var> {
        let xd = self.dims(x);
        if xd.len() != 3 || h_to < xd[1] || w_to < xd[2] {
            return Err(Error::dim("pad", format!("{xd:?} to {h_to}x{w_to}")));
        }
        let (c, h, w) = (xd[0], xd[1], xd[2]);
        if h == h_to && w == w_to {
            return Ok(x);
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * h_to * w_to];
        for ch in 0..c {
            for y in 0..h {
                let s = (ch * h + y) * w;
                let d = (ch * h_to + y) * w_to;
                out[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![c, h_to, w_to], out)?, Op::Window(x), ng))
    }

    /// Keeps the top-left `(c, h, w)` window of a `(c, H, W)` map.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if xd.len() != 3 || h > xd[1] || w > xd[2] {
            return Err(Error::dim("crop", format!("{xd:?} to {h}x{w}")));
        }
        if h == xd[1] && w == xd[2] {
            return Ok(x);
        }
        let t = self.value(x);
        let (c, hh, ww) = (xd[0], xd[1], xd[2]);
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let s = (ch * hh + y) * ww;
                out.extend_from_slice(&t.data()[s..s + w]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![c, h, w], out)?, Op::Window(x), ng))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.dims(loss)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let params = self
            .params
            .iter()
            .map(|(k, &v)| (k.clone(), v))
            .collect::<BTreeMap<_, _>>();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(T::one(), &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.dims()[0], ta.dims()[1], tb.dims()[1]);
                if self.ng(*a) {
                    let ga = kernels::matmul_nt(gd, tb.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if self.ng(*b) {
                    let gb = kernels::matmul_tn(ta.data(), gd, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.dims()[0], g.dims()[1]);
                let ga = kernels::transpose(gd, r, c);
                self.accumulate(grads, *a, Tensor::new(vec![c, r], ga)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = gd.iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.dims().to_vec(), d)?);
                }
                if self.ng(*b) {
                    let d = gd.iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.dims().to_vec(), d)?);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.ng(*b) {
                    let n = self.value(*b).len();
                    let mut gb = vec![T::zero(); n];
                    for (i, &v) in gd.iter().enumerate() {
                        gb[i % n] += v;
                    }
                    self.accumulate(grads, *b, Tensor::new(self.dims(*b).to_vec(), gb)?);
                }
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).data()[0];
                self.accumulate(grads, *x, g.map(|v| v * sv));
                if self.ng(*s) {
                    let gs = g.dot(self.value(*x));
                    self.accumulate(grads, *s, Tensor::new(self.dims(*s).to_vec(), vec![gs])?);
                }
            }
            Op::Abs(a) => {
                let ta = self.value(*a);
                let d = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(&gv, &x)| {
                        if x > T::zero() {
                            gv
                        } else if x < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(ta.dims().to_vec(), d)?);
            }
            Op::Sum(a) => {
                let dims = self.dims(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(&dims, gd[0]));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let v = gd[0] / T::lit(ta.len() as f64);
                self.accumulate(grads, *a, Tensor::full(ta.dims(), v));
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let d = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(&gv, &x)| gv * (normal_cdf(x) + x * normal_pdf(x)))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(ta.dims().to_vec(), d)?);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.dims().last().unwrap_or(&1);
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let inner: T = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - inner);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(node.value.dims().to_vec(), d)?);
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std,
            } => {
                let c = self.value(*scale).len();
                let p = normalized.len() / c;
                let sc = self.value(*scale).data();
                if self.ng(*shift) {
                    let gs: Vec<T> = gd.chunks(p).map(|r| r.iter().copied().sum()).collect();
                    self.accumulate(grads, *shift, Tensor::new(self.dims(*shift).to_vec(), gs)?);
                }
                if self.ng(*scale) {
                    let gs: Vec<T> = gd
                        .chunks(p)
                        .zip(normalized.chunks(p))
                        .map(|(gr, nr)| gr.iter().zip(nr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *scale, Tensor::new(self.dims(*scale).to_vec(), gs)?);
                }
                if self.ng(*x) {
                    let cf = T::lit(c as f64);
                    let mut sum_g = vec![T::zero(); p];
                    let mut sum_gx = vec![T::zero(); p];
                    for ch in 0..c {
                        for i in 0..p {
                            let gh = gd[ch * p + i] * sc[ch];
                            sum_g[i] += gh;
                            sum_gx[i] += gh * normalized[ch * p + i];
                        }
                    }
                    let mut gx = vec![T::zero(); c * p];
                    for ch in 0..c {
                        for i in 0..p {
                            let gh = gd[ch * p + i] * sc[ch];
                            gx[ch * p + i] = inv_std[i] / cf
                                * (cf * gh - sum_g[i] - normalized[ch * p + i] * sum_gx[i]);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(self.dims(*x).to_vec(), gx)?);
                }
            }
            Op::Depthwise(x, k) => {
                let xd = self.dims(*x);
                let (c, h, w) = (xd[0], xd[1], xd[2]);
                let (gx, gk) = kernels::depthwise3x3_backward(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    gd,
                    c,
                    h,
                    w,
                );
                self.accumulate(grads, *x, Tensor::new(vec![c, h, w], gx)?);
                self.accumulate(grads, *k, Tensor::new(vec![c, 3, 3], gk)?);
            }
            Op::PixelUnshuffle(x, r) => {
                let d = g.dims();
                let gx = kernels::pixel_shuffle(gd, d[0], d[1], d[2], *r);
                self.accumulate(grads, *x, Tensor::new(self.dims(*x).to_vec(), gx)?);
            }
            Op::PixelShuffle(x, r) => {
                let d = g.dims();
                let gx = kernels::pixel_unshuffle(gd, d[0], d[1], d[2], *r);
                self.accumulate(grads, *x, Tensor::new(self.dims(*x).to_vec(), gx)?);
            }
            Op::Reshape(x) => {
                let t = g.clone().reshape(self.dims(*x))?;
                self.accumulate(grads, *x, t);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.ng(p) {
                        let t = Tensor::new(self.dims(p).to_vec(), gd[off..off + n].to_vec())?;
                        self.accumulate(grads, p, t);
                    }
                    off += n;
                }
            }
            Op::Narrow { x, start } => {
                let xd = self.dims(*x);
                let stride: usize = xd[1..].iter().product();
                let mut gx = vec![T::zero(); self.value(*x).len()];
                gx[start * stride..start * stride + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, Tensor::new(xd.to_vec(), gx)?);
            }
            Op::SpatialMean(x) => {
                let tx = self.value(*x);
                let c = tx.dims()[0];
                let p = tx.len() / c;
                let pf = T::lit(p as f64);
                let gx = (0..tx.len()).map(|i| gd[i / p] / pf).collect();
                self.accumulate(grads, *x, Tensor::new(tx.dims().to_vec(), gx)?);
            }
            Op::L2NormalizeRows { x, inv_norm } => {
                let y = node.value.data();
                let n = node.value.dims()[1];
                let mut gx = vec![T::zero(); y.len()];
                for (r, ((o, yr), gr)) in gx
                    .chunks_mut(n)
                    .zip(y.chunks(n))
                    .zip(gd.chunks(n))
                    .enumerate()
                {
                    let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = (gv - yv * inner) * inv_norm[r];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(node.value.dims().to_vec(), gx)?);
            }
            Op::Window(x) => {
                let src_dims = self.dims(*x).to_vec();
                let (c, sh, sw) = (src_dims[0], src_dims[1], src_dims[2]);
                let (oh, ow) = (g.dims()[1], g.dims()[2]);
                let (rows, cols) = (sh.min(oh), sw.min(ow));
                let mut gx = vec![T::zero(); c * sh * sw];
                for ch in 0..c {
                    for y in 0..rows {
                        let s = (ch * oh + y) * ow;
                        let d = (ch * sh + y) * sw;
                        gx[d..d + cols].copy_from_slice(&gd[s..s + cols]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(src_dims, gx)?);
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.dims()))
    }

    /// Gradients of every trainable parameter that was bound on the graph, keyed by name.
    pub fn named(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter_map(|(k, &v)| self.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}
