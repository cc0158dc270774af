use super::kernels::{self, ConvGeom, Layout};
use super::real::{sigmoid, silu, silu_grad};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused primitive defined outside this module.
///
/// The tape stores the forward value; the op only has to map an output
/// gradient to input gradients. Return `None` for inputs whose entry in
/// `needs_grad` is false.
pub trait CustomOp<T: Real>: Send {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    AdaptiveAvgPool(Var, usize),
    UpsampleNearest(Var),
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBias(a, b)
            | Op::AddChannelBias(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Silu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::AdaptiveAvgPool(a, _)
            | Op::UpsampleNearest(a)
            | Op::GlobalAvgPool(a) => vec![*a],
            Op::Concat(v) | Op::Custom(v, _) => v.clone(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Result<&Tensor<T>> {
        self.grads
            .get(var.0)
            .and_then(Option::as_ref)
            .ok_or_else(|| {
                Error::AbsentGradient(format!(
                    "value #{} does not require a gradient or was recorded after the loss",
                    var.0
                ))
            })
    }
}

/// Wengert list recording every primitive evaluated in a forward pass.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid reverse topological order for the chain rule.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn expect_rank<T: Real>(op: &str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(format!(
            "{op}: expected a rank-{rank} tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf that gradients flow into.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, true)
    }

    /// Records a leaf that is treated as a constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records the result of a fused primitive whose backward rule lives in `op`.
    pub fn custom(
        &mut self,
        inputs: Vec<Var>,
        value: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Var {
        self.push(value, Op::Custom(inputs, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(format!(
                "matmul: cannot multiply {:?} by {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, ta.data(), Layout::Plain, tb.data(), Layout::Plain, &mut out, false);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// 3×3 convolution with padding 1, no bias. `x: C_in×H×W`, `w: C_out×C_in×3×3`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        expect_rank("conv2d input", tx, 3)?;
        expect_rank("conv2d kernel", tw, 4)?;
        if !(1..=2).contains(&stride) {
            return Err(Error::Config(format!("conv2d: stride {stride} not in {{1, 2}}")));
        }
        let (c_in, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if tw.shape()[1] != c_in || tw.shape()[2] != 3 || tw.shape()[3] != 3 {
            return Err(Error::dim(format!(
                "conv2d: kernel {:?} does not fit input {:?}",
                tw.shape(),
                tx.shape()
            )));
        }
        if h < 3 || wd < 3 {
            return Err(Error::dim(format!("conv2d: input {:?} smaller than 3×3", tx.shape())));
        }
        let geom = ConvGeom {
            channels: c_in,
            height: h,
            width: wd,
            stride,
        };
        let c_out = tw.shape()[0];
        let cols = kernels::im2col(tx.data(), geom);
        let p = geom.positions();
        let mut out = vec![T::zero(); c_out * p];
        kernels::gemm(c_out, geom.patch_len(), p, tw.data(), Layout::Plain, &cols, Layout::Plain, &mut out, false);
        let value = Tensor::new([c_out, geom.out_height(), geom.out_width()], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geom, cols }))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(silu);
        self.push(v, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::of(t.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        expect_rank("transpose", t, 2)?;
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let v = Tensor::new([c, r], out)?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    /// `x: m×n` plus `b: n` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        expect_rank("add_row_bias", tx, 2)?;
        if tb.len() != tx.shape()[1] {
            return Err(Error::dim(format!(
                "add_row_bias: bias {:?} does not fit rows of {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(tb.len().max(1)) {
            for (v, &bias) in row.iter_mut().zip(tb.data()) {
                *v += bias;
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddRowBias(x, b)))
    }

    /// `x: C×H×W` plus `b: C` broadcast over each channel plane.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        expect_rank("add_channel_bias", tx, 3)?;
        if tb.len() != tx.shape()[0] {
            return Err(Error::dim(format!(
                "add_channel_bias: bias {:?} does not fit channels of {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let plane = tx.shape()[1] * tx.shape()[2];
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i / plane])
            .collect();
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddChannelBias(x, b)))
    }

    /// Adaptive average pooling of `C×H×W` to `C×S×S`.
    pub fn adaptive_avg_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let t = self.value(x);
        expect_rank("adaptive_avg_pool", t, 3)?;
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if size == 0 || size > h || size > w {
            return Err(Error::dim(format!(
                "adaptive_avg_pool: cannot pool {:?} to {size}×{size}",
                t.shape()
            )));
        }
        let (rows, cols) = (kernels::adaptive_bins(h, size), kernels::adaptive_bins(w, size));
        let src = t.data();
        let mut out = Vec::with_capacity(c * size * size);
        for ch in 0..c {
            let plane = &src[ch * h * w..][..h * w];
            for &(y0, y1) in &rows {
                for &(x0, x1) in &cols {
                    let mut s = T::zero();
                    for y in y0..y1 {
                        for v in &plane[y * w + x0..y * w + x1] {
                            s += *v;
                        }
                    }
                    out.push(s / T::of(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        let v = Tensor::new([c, size, size], out)?;
        Ok(self.push(v, Op::AdaptiveAvgPool(x, size)))
    }

    /// Nearest-neighbour upsampling of `C×S×S` to `C×H×W`; output pixel `(y, x)`
    /// reads source `(⌊y·S/H⌋, ⌊x·S/W⌋)`.
    pub fn upsample_nearest(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let t = self.value(x);
        expect_rank("upsample_nearest", t, 3)?;
        let (c, sh, sw) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if height < sh || width < sw {
            return Err(Error::dim(format!(
                "upsample_nearest: target {height}×{width} smaller than source {:?}",
                t.shape()
            )));
        }
        let src = t.data();
        let mut out = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            for y in 0..height {
                let sy = y * sh / height;
                for xo in 0..width {
                    out.push(src[(ch * sh + sy) * sw + xo * sw / width]);
                }
            }
        }
        let v = Tensor::new([c, height, width], out)?;
        Ok(self.push(v, Op::UpsampleNearest(x)))
    }

    /// Mean over the spatial axes of `C×H×W`, giving `C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        expect_rank("global_avg_pool", t, 3)?;
        let c = t.shape()[0];
        let plane = t.shape()[1] * t.shape()[2];
        let inv = T::one() / T::of(plane as f64);
        let out = t
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::new([c], out)?;
        Ok(self.push(v, Op::GlobalAvgPool(x)))
    }

    /// Concatenation along the leading axis; trailing axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let scalar_like = t.rank() == 0 && tail.is_empty();
            if !scalar_like && (t.rank() == 0 || t.shape()[1..] != tail[..]) {
                return Err(Error::dim(format!(
                    "concat: part shape {:?} does not match trailing axes {tail:?}",
                    t.shape()
                )));
            }
            lead += if scalar_like { 1 } else { t.shape()[0] };
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// Clears the "already differentiated" marker so the tape can be replayed.
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every value that requires a gradient receives one, zero if it does
    /// not influence the loss. A second call without [`Tape::reset`] fails.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; call reset() before replaying".into(),
            ));
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .enumerate()
            .map(|(i, (node, g))| {
                if !node.requires_grad || i > loss.0 {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, g, Layout::Plain, tb.data(), Layout::Trans, &mut da, false);
                    accumulate(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm(k, m, n, ta.data(), Layout::Trans, g, Layout::Plain, &mut db, false);
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let tw = self.value(*w);
                let c_out = tw.shape()[0];
                let (kp, p) = (geom.patch_len(), geom.positions());
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); c_out * kp];
                    kernels::gemm(c_out, p, kp, g, Layout::Plain, cols, Layout::Trans, &mut dw, false);
                    accumulate(&mut grads[w.0], dw);
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); kp * p];
                    kernels::gemm(kp, c_out, p, tw.data(), Layout::Trans, g, Layout::Plain, &mut dcols, false);
                    accumulate(&mut grads[x.0], kernels::col2im(&dcols, *geom));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.iter().zip(tb.data()).map(|(&g, &y)| g * y).collect();
                    accumulate(&mut grads[a.0], d);
                }
                if self.needs(*b) {
                    let d = g.iter().zip(ta.data()).map(|(&g, &x)| g * x).collect();
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::Scale(a, s) => {
                accumulate(&mut grads[a.0], g.iter().map(|&v| v * *s).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                accumulate(&mut grads[a.0], g.to_vec());
            }
            Op::Silu(a) => {
                let d = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&g, &x)| g * silu_grad(x))
                    .collect();
                accumulate(&mut grads[a.0], d);
            }
            Op::Sigmoid(a) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                accumulate(&mut grads[a.0], d);
            }
            Op::Tanh(a) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &t)| g * (T::one() - t * t))
                    .collect();
                accumulate(&mut grads[a.0], d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], vec![g[0] / T::of(n as f64); n]);
            }
            Op::Transpose(a) => {
                // out is c×r; gradient back to r×c
                let (c, r) = (out.shape()[0], out.shape()[1]);
                let mut d = vec![T::zero(); r * c];
                for j in 0..c {
                    for i in 0..r {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::AddRowBias(x, b) => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
                if self.needs(*b) {
                    let n = out.shape()[1];
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::AddChannelBias(x, b) => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
                if self.needs(*b) {
                    let plane = out.shape()[1] * out.shape()[2];
                    let db = g.chunks(plane).map(|p| p.iter().copied().sum()).collect();
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::AdaptiveAvgPool(x, size) => {
                let tx = self.value(*x);
                let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let rows = kernels::adaptive_bins(h, *size);
                let cols = kernels::adaptive_bins(w, *size);
                let mut d = vec![T::zero(); c * h * w];
                let mut k = 0;
                for ch in 0..c {
                    for &(y0, y1) in &rows {
                        for &(x0, x1) in &cols {
                            let share = g[k] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                            k += 1;
                            for y in y0..y1 {
                                for v in &mut d[(ch * h + y) * w + x0..(ch * h + y) * w + x1] {
                                    *v += share;
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::UpsampleNearest(x) => {
                let tx = self.value(*x);
                let (c, sh, sw) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (h, w) = (out.shape()[1], out.shape()[2]);
                let mut d = vec![T::zero(); c * sh * sw];
                for ch in 0..c {
                    for y in 0..h {
                        let sy = y * sh / h;
                        for xo in 0..w {
                            d[(ch * sh + sy) * sw + xo * sw / w] += g[(ch * h + y) * w + xo];
                        }
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::GlobalAvgPool(x) => {
                let tx = self.value(*x);
                let plane = tx.shape()[1] * tx.shape()[2];
                let inv = T::one() / T::of(plane as f64);
                let d = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, plane))
                    .collect();
                accumulate(&mut grads[x.0], d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.needs(*p) {
                        accumulate(&mut grads[p.0], g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let contributions = op.backward(&values, out, g, &needs);
                for ((v, need), c) in inputs.iter().zip(needs).zip(contributions) {
                    if let (true, Some(c)) = (need, c) {
                        debug_assert_eq!(c.len(), self.value(*v).len(), "{} gradient length", op.name());
                        accumulate(&mut grads[v.0], c);
                    }
                }
            }
        }
    }
}
