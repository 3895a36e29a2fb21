//! Recorded computation graph with reverse-mode adjoints.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order; [`Tape::backward`] walks it once from the loss down to
//! the first node.

use crate::element::Element;
use crate::error::{invalid, Result, TensorError};
use crate::kernels::{self, ConvGeom, GroupNormStats};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Relu,
    Exp,
    Square,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, out_ch: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, in_ch: usize },
    Linear { x: Var, w: Var, b: Option<Var>, n: usize, din: usize, dout: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: GroupNormStats<T> },
    Unary { x: Var, kind: Unary },
    Silu { x: Var, sig: Vec<T> },
    Clamp { x: Var, lo: T, hi: T },
    Scale { x: Var, factor: T },
    AddScalar { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddChannelBias { x: Var, bias: Var },
    AvgPool2 { x: Var },
    Upsample2 { x: Var },
    Concat { parts: Vec<Var> },
    NarrowChannels { x: Var, start: usize },
    Reshape { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Mse { a: Var, b: Var },
    Embedding { table: Var, indices: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Single-threaded recording of one forward pass.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input: no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient [`Tape::backward`] will report.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
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

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = if shape.is_empty() { Tensor::scalar(data[0]) } else { Tensor::from_vec(shape, data)? };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn nchw(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        self.value(v)
            .dims4()
            .map_err(|_| invalid(op, format!("expected NCHW input, got {:?}", self.shape(v))))
    }

    fn check_bias(&self, b: Option<Var>, len: usize, op: &'static str) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [len] {
                return Err(mismatch(op, self.shape(b), &[len]));
            }
        }
        Ok(())
    }

    /// Cross-correlation; `x: (N, C, H, W)`, `w: (O, C, kH, kW)`, optional `b: (O)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.nchw(x, "conv2d")?;
        let [o, ci, kh, kw] = self.nchw(w, "conv2d")?;
        if ci != c {
            return Err(mismatch("conv2d", self.shape(x), self.shape(w)));
        }
        self.check_bias(b, o, "conv2d")?;
        let geom = ConvGeom::new(n, c, h, wd, kh, kw, stride, pad).ok_or_else(|| {
            invalid("conv2d", format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {h}x{wd}"))
        })?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
            o,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", vec![n, o, geom.oh, geom.ow], out, Op::Conv2d { x, w, b, geom, out_ch: o }, &inputs)
    }

    /// Transposed convolution; `x: (N, Cin, H, W)`, `w: (Cin, Cout, kH, kW)`.
    /// Output side is `(H - 1) * stride - 2 * pad + kH`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, h, wd] = self.nchw(x, "conv_transpose2d")?;
        let [ci, cout, kh, kw] = self.nchw(w, "conv_transpose2d")?;
        if ci != cin {
            return Err(mismatch("conv_transpose2d", self.shape(x), self.shape(w)));
        }
        self.check_bias(b, cout, "conv_transpose2d")?;
        let geom = kernels::conv_transpose_geom(n, cout, h, wd, kh, kw, stride, pad)
            .ok_or_else(|| invalid("conv_transpose2d", format!("invalid geometry k={kh} stride={stride} pad={pad}")))?;
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
            cin,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv_transpose2d",
            vec![n, cout, geom.h, geom.w],
            out,
            Op::ConvTranspose2d { x, w, b, geom, in_ch: cin },
            &inputs,
        )
    }

    /// `x: (N, in)`, `w: (out, in)`, optional `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, din] = self.value(x).dims2()?;
        let [dout, wi] = self.value(w).dims2()?;
        if wi != din {
            return Err(mismatch("linear", self.shape(x), self.shape(w)));
        }
        self.check_bias(b, dout, "linear")?;
        let out = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            n,
            din,
            dout,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", vec![n, dout], out, Op::Linear { x, w, b, n, din, dout }, &inputs)
    }

    /// Group normalization over `(C / groups, H, W)` slabs with affine `gamma, beta: (C)`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(invalid("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        self.check_bias(Some(gamma), c, "group_norm")?;
        self.check_bias(Some(beta), c, "group_norm")?;
        let (out, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            h * w,
            groups,
            T::from_f64(1e-5),
        );
        let shape = self.shape(x).to_vec();
        self.push("group_norm", shape, out, Op::GroupNorm { x, gamma, beta, groups, stats }, &[x, gamma, beta])
    }

    fn unary(&mut self, x: Var, kind: Unary, name: &'static str) -> Result<Var> {
        let f: fn(T) -> T = match kind {
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Relu => |v| v.max(T::zero()),
            Unary::Exp => T::exp,
            Unary::Square => |v| v * v,
        };
        let out = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, shape, out, Op::Unary { x, kind }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).data();
        let sig: Vec<T> = xs.iter().map(|&v| kernels::sigmoid(v)).collect();
        let out = xs.iter().zip(&sig).map(|(&v, &s)| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push("silu", shape, out, Op::Silu { x, sig }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid, "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu, "relu")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp, "exp")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square, "square")
    }

    /// Elementwise clamp; the gradient is zero where the input was clipped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let out = self.value(x).data().iter().map(|&v| v.max(lo).min(hi)).collect();
        let shape = self.shape(x).to_vec();
        self.push("clamp", shape, out, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let factor = T::from_f64(factor);
        let out = self.value(x).data().iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale { x, factor }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let out = self.value(x).data().iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", shape, out, Op::AddScalar { x }, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push("add", shape, out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push("sub", shape, out, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push("mul", shape, out, Op::Mul { a, b }, &[a, b])
    }

    /// `x: (N, C, H, W)` plus a per-sample, per-channel `bias: (N, C)`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "add_channel_bias")?;
        if self.shape(bias) != [n, c] {
            return Err(mismatch("add_channel_bias", self.shape(x), self.shape(bias)));
        }
        let hw = h * w;
        let bd = self.value(bias).data();
        let out = self.value(x).data().iter().enumerate().map(|(i, &v)| v + bd[i / hw]).collect();
        self.push("add_channel_bias", vec![n, c, h, w], out, Op::AddChannelBias { x, bias }, &[x, bias])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "avg_pool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("avg_pool2d", format!("odd spatial size {h}x{w}")));
        }
        let out = kernels::avg_pool2(self.value(x).data(), n * c, h, w);
        self.push("avg_pool2d", vec![n, c, h / 2, w / 2], out, Op::AvgPool2 { x }, &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "upsample_nearest")?;
        let out = kernels::upsample2(self.value(x).data(), n * c, h, w);
        self.push("upsample_nearest", vec![n, c, 2 * h, 2 * w], out, Op::Upsample2 { x }, &[x])
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let [n, _, h, w] = self.nchw(first, "concat")?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pn, pc, ph, pw] = self.nchw(p, "concat")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(mismatch("concat", self.shape(first), self.shape(p)));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for ni in 0..n {
            for (&p, &pc) in parts.iter().zip(&chans) {
                out.extend_from_slice(&self.value(p).data()[ni * pc * hw..(ni + 1) * pc * hw]);
            }
        }
        self.push("concat", vec![n, total, h, w], out, Op::Concat { parts: parts.to_vec() }, parts)
    }

    /// Channels `start..start + len` of an NCHW tensor.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "narrow_channels")?;
        if len == 0 || start + len > c {
            return Err(invalid("narrow_channels", format!("{start}..{} out of {c} channels", start + len)));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for ni in 0..n {
            out.extend_from_slice(&src[(ni * c + start) * hw..(ni * c + start + len) * hw]);
        }
        self.push("narrow_channels", vec![n, len, h, w], out, Op::NarrowChannels { x, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let out = self.value(x).data().to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", vec![], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_f64(t.len() as f64);
        self.push("mean", vec![], vec![s], Op::Mean { x }, &[x])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mse", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let s = ad.iter().zip(bd).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / T::from_f64(ad.len() as f64);
        self.push("mse", vec![], vec![s], Op::Mse { a, b }, &[a, b])
    }

    /// Row lookup `table[indices[i]]` for `table: (V, d)`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let [v, d] = self.value(table).dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(invalid("embedding", format!("index {bad} out of range for {v} rows")));
        }
        if indices.is_empty() {
            return Err(invalid("embedding", "no indices"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            "embedding",
            vec![indices.len(), d],
            out,
            Op::Embedding { table, indices: indices.to_vec() },
            &[table],
        )
    }

    /// Mean softmax cross-entropy of `logits: (N, K)` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [n, k] = self.value(logits).dims2()?;
        if targets.len() != n || targets.iter().any(|&t| t >= k) {
            return Err(invalid("cross_entropy", format!("{} targets for {n}x{k} logits", targets.len())));
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = T::zero();
        for (row, &t) in src.chunks(k).zip(targets) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z = row.iter().map(|&v| (v - m).exp()).sum::<T>();
            loss += z.ln() + m - row[t];
            probs.extend(row.iter().map(|&v| (v - m).exp() / z));
        }
        loss /= T::from_f64(n as f64);
        self.push(
            "cross_entropy",
            vec![],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        let acc = |grads: &mut Vec<Option<Vec<T>>>, v: Var, g: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(g) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| nodes[v.0].value.data();
            let needs = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, geom, out_ch } => {
                    let r = kernels::conv2d_backward(
                        val(*x),
                        val(*w),
                        &g,
                        geom,
                        *out_ch,
                        [needs(*x), needs(*w), b.is_some_and(needs)],
                    );
                    if let Some(d) = r.dx {
                        acc(&mut grads, *x, d);
                    }
                    if let Some(d) = r.dw {
                        acc(&mut grads, *w, d);
                    }
                    if let (Some(b), Some(d)) = (b, r.db) {
                        acc(&mut grads, *b, d);
                    }
                }
                Op::ConvTranspose2d { x, w, b, geom, in_ch } => {
                    let r = kernels::conv_transpose2d_backward(
                        val(*x),
                        val(*w),
                        &g,
                        geom,
                        *in_ch,
                        [needs(*x), needs(*w), b.is_some_and(needs)],
                    );
                    if let Some(d) = r.dx {
                        acc(&mut grads, *x, d);
                    }
                    if let Some(d) = r.dw {
                        acc(&mut grads, *w, d);
                    }
                    if let (Some(b), Some(d)) = (b, r.db) {
                        acc(&mut grads, *b, d);
                    }
                }
                Op::Linear { x, w, b, n, din, dout } => {
                    let r = kernels::linear_backward(
                        val(*x),
                        val(*w),
                        &g,
                        *n,
                        *din,
                        *dout,
                        [needs(*x), needs(*w), b.is_some_and(needs)],
                    );
                    if let Some(d) = r.dx {
                        acc(&mut grads, *x, d);
                    }
                    if let Some(d) = r.dw {
                        acc(&mut grads, *w, d);
                    }
                    if let (Some(b), Some(d)) = (b, r.db) {
                        acc(&mut grads, *b, d);
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let [n, c, h, w] = nodes[x.0].value.dims4()?;
                    let (dx, dg, db) =
                        kernels::group_norm_backward(val(*x), val(*gamma), stats, &g, n, c, h * w, *groups);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dg);
                    acc(&mut grads, *beta, db);
                }
                Op::Silu { x, sig } => {
                    let d = val(*x)
                        .iter()
                        .zip(sig)
                        .zip(&g)
                        .map(|((&v, &s), &gg)| gg * (s + v * s * (T::one() - s)))
                        .collect();
                    acc(&mut grads, *x, d);
                }
                Op::Unary { x, kind } => {
                    let xs = val(*x);
                    let ys = node.value.data();
                    let d: Vec<T> = match kind {
                        Unary::Sigmoid => ys.iter().zip(&g).map(|(&y, &gg)| gg * y * (T::one() - y)).collect(),
                        Unary::Relu => xs
                            .iter()
                            .zip(&g)
                            .map(|(&v, &gg)| if v > T::zero() { gg } else { T::zero() })
                            .collect(),
                        Unary::Exp => ys.iter().zip(&g).map(|(&y, &gg)| gg * y).collect(),
                        Unary::Square => {
                            let two = T::from_f64(2.0);
                            xs.iter().zip(&g).map(|(&v, &gg)| gg * two * v).collect()
                        }
                    };
                    acc(&mut grads, *x, d);
                }
                Op::Clamp { x, lo, hi } => {
                    let d = val(*x)
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gg)| if v < *lo || v > *hi { T::zero() } else { gg })
                        .collect();
                    acc(&mut grads, *x, d);
                }
                Op::Scale { x, factor } => acc(&mut grads, *x, g.iter().map(|&v| v * *factor).collect()),
                Op::AddScalar { x } | Op::Reshape { x } => acc(&mut grads, *x, g),
                Op::Add { a, b } => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub { a, b } => {
                    acc(&mut grads, *b, g.iter().map(|&v| -v).collect());
                    acc(&mut grads, *a, g);
                }
                Op::Mul { a, b } => {
                    let da = g.iter().zip(val(*b)).map(|(&gg, &y)| gg * y).collect();
                    let db = g.iter().zip(val(*a)).map(|(&gg, &x)| gg * x).collect();
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddChannelBias { x, bias } => {
                    let [_, _, h, w] = nodes[x.0].value.dims4()?;
                    let db = g.chunks(h * w).map(|c| c.iter().copied().sum::<T>()).collect();
                    acc(&mut grads, *bias, db);
                    acc(&mut grads, *x, g);
                }
                Op::AvgPool2 { x } => {
                    let [n, c, h, w] = nodes[x.0].value.dims4()?;
                    acc(&mut grads, *x, kernels::avg_pool2_backward(&g, n * c, h, w));
                }
                Op::Upsample2 { x } => {
                    let [n, c, h, w] = nodes[x.0].value.dims4()?;
                    acc(&mut grads, *x, kernels::upsample2_backward(&g, n * c, h, w));
                }
                Op::Concat { parts } => {
                    let [n, total, h, w] = node.value.dims4()?;
                    let hw = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = nodes[p.0].value.shape()[1];
                        if needs(p) {
                            let mut d = Vec::with_capacity(n * pc * hw);
                            for ni in 0..n {
                                let base = (ni * total + offset) * hw;
                                d.extend_from_slice(&g[base..base + pc * hw]);
                            }
                            acc(&mut grads, p, d);
                        }
                        offset += pc;
                    }
                }
                Op::NarrowChannels { x, start } => {
                    let [n, c, h, w] = nodes[x.0].value.dims4()?;
                    let len = node.value.shape()[1];
                    let hw = h * w;
                    let mut d = vec![T::zero(); n * c * hw];
                    for ni in 0..n {
                        d[(ni * c + start) * hw..(ni * c + start + len) * hw]
                            .copy_from_slice(&g[ni * len * hw..(ni + 1) * len * hw]);
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Sum { x } => acc(&mut grads, *x, vec![g[0]; nodes[x.0].value.len()]),
                Op::Mean { x } => {
                    let len = nodes[x.0].value.len();
                    acc(&mut grads, *x, vec![g[0] / T::from_f64(len as f64); len]);
                }
                Op::Mse { a, b } => {
                    let (ad, bd) = (val(*a), val(*b));
                    let k = g[0] * T::from_f64(2.0 / ad.len() as f64);
                    let da: Vec<T> = ad.iter().zip(bd).map(|(&x, &y)| k * (x - y)).collect();
                    acc(&mut grads, *b, da.iter().map(|&v| -v).collect());
                    acc(&mut grads, *a, da);
                }
                Op::Embedding { table, indices } => {
                    let [v, d] = nodes[table.0].value.dims2()?;
                    let mut dt = vec![T::zero(); v * d];
                    for (row, &i) in g.chunks(d).zip(indices) {
                        for (t, &x) in dt[i * d..(i + 1) * d].iter_mut().zip(row) {
                            *t += x;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let [n, k] = nodes[logits.0].value.dims2()?;
                    let scale = g[0] / T::from_f64(n as f64);
                    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * k + t] -= scale;
                    }
                    acc(&mut grads, *logits, d);
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::from_vec(node.value.shape().to_vec(), g).unwrap_or_else(|_| Tensor::scalar(T::zero())))
                }
                (None, Op::Leaf) if node.requires_grad => Some(Tensor::zeros(node.value.shape().to_vec())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec([4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec([3], vec![1.0, 2.0, 3.0]).unwrap());
        let c = tape.constant(Tensor::from_vec([3], vec![4.0, 5.0, 6.0]).unwrap());
        let loss = tape.sum(c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn conv_identity_and_hand_sums() {
        let mut tape = Tape::<f32>::new();
        let img = Tensor::from_vec([1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let x = tape.constant(img.clone());
        let id = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let y = tape.conv2d(x, id, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), &img);

        let ones = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = tape.conv2d(ones, k, None, 1, 1).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[4], 9.0);
        assert_eq!(d[0], 4.0);
        assert_eq!(d[2], 4.0);
        assert_eq!(d[1], 6.0);
    }

    #[test]
    fn conv_strided_output_shape() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 4, 16, 16]));
        let w = tape.constant(Tensor::zeros([8, 4, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 8, 8, 8]);
    }

    #[test]
    fn conv_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 3, 8, 8]));
        let w = tape.constant(Tensor::zeros([8, 4, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 8, 8]") && err.contains("[8, 4, 3, 3]"), "{err}");
    }

    #[test]
    fn transpose_after_conv_restores_spatial_dims() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([2, 3, 16, 16]));
        let w = tape.constant(Tensor::zeros([5, 3, 4, 4]));
        let down = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.shape(down), &[2, 5, 8, 8]);
        let wt = tape.constant(Tensor::zeros([5, 3, 4, 4]));
        let up = tape.conv_transpose2d(down, wt, None, 2, 1).unwrap();
        assert_eq!(tape.shape(up), &[2, 3, 16, 16]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([2], 100.0));
        assert!(matches!(tape.exp(x), Err(TensorError::NonFinite { op: "exp" })));
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec([2], vec![1.5, -0.5]).unwrap());
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let loss = tape.sum(z).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 0.0]);
    }
}
