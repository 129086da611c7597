//! Tape of tensor operations and its reverse sweep.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order; [`Graph::backward`] walks it once in reverse.

use std::ops::Range;

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvDims};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Silu(Var),
    Sigmoid(Var),
    Log(Var),
    Abs(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Concat(Vec<Var>),
    Mean(Var),
    Sum(Var),
    Mse(Var, Var),
    AddPerChannel {
        x: Var,
        v: Var,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Crop {
        x: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    MeanPerSample(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Elem> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<T: Elem = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

fn mismatch<T: Elem>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn zip_map<T: Elem>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

#[inline]
fn sigmoid<T: Elem>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Self {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf (parameter or input we want gradients for).
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Allows another backward sweep over the same graph.
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize, usize)> {
        self.value(v).dims4(op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Scalar multiple `s·a`.
    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    /// Stride-1, zero-padded ("same") 2-D convolution with an odd square
    /// kernel. `x`: [N,Cin,H,W], `w`: [Cout,Cin,k,k], `b`: [Cout].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, cin, h, wd) = self.dims4("conv2d", x)?;
        let (cout, wcin, kh, kw) = self.dims4("conv2d", w)?;
        if wcin != cin || kh != kw || kh % 2 == 0 {
            return Err(mismatch("conv2d", self.value(x), self.value(w)));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(mismatch("conv2d", self.value(w), self.value(b)));
            }
        }
        let d = ConvDims {
            n,
            cin,
            cout,
            h,
            w: wd,
            k: kh,
        };
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &d,
        );
        let out = Tensor::new(vec![n, cout, h, wd], data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", out, Op::Conv2d { x, w, b, k: kh }, &inputs)
    }

    /// `x`: [N,in], `w`: [out,in], `b`: [out] → x·wᵀ + b.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, fin, fout) = match (tx.shape(), tw.shape()) {
            ([n, fin], [fout, win]) if fin == win => (*n, *fin, *fout),
            _ => return Err(mismatch("linear", tx, tw)),
        };
        let mut data = vec![T::ZERO; n * fout];
        let mut beta = T::ZERO;
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [fout] {
                return Err(mismatch("linear", tw, tb));
            }
            for row in data.chunks_exact_mut(fout) {
                row.copy_from_slice(tb.data());
            }
            beta = T::ONE;
        }
        T::gemm(n, fin, fout, tx.data(), false, tw.data(), true, beta, &mut data);
        let out = Tensor::new(vec![n, fout], data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", out, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.ln());
        self.push("log", out, Op::Log(a), &[a])
    }

    /// |a|, with subgradient 0 at a = 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.abs());
        self.push("abs", out, Op::Abs(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push("clamp", out, Op::Clamp { x: a, lo, hi }, &[a])
    }

    /// Group normalization over [N,C,H,W] with per-channel affine terms.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4("group_norm", x)?;
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::InvalidShape {
                op: "group_norm",
                shape: self.value(x).shape().to_vec(),
                reason: format!("{c} channels not divisible into {groups} groups"),
            });
        }
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(mismatch("group_norm", self.value(x), self.value(p)));
            }
        }
        let (data, means, rstds) = kernels::group_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            h * w,
            groups,
        );
        let out = Tensor::new(vec![n, c, h, w], data)?;
        let op = Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            means,
            rstds,
        };
        self.push("group_norm", out, op, &[x, gamma, beta])
    }

    /// Concatenates [N,Ci,H,W] tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::InvalidShape {
                op: "concat_channels",
                shape: Vec::new(),
                reason: "no inputs".into(),
            });
        };
        let (n, _, h, w) = self.dims4("concat_channels", first)?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.dims4("concat_channels", p)?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(mismatch("concat_channels", self.value(first), self.value(p)));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                data.extend_from_slice(&t.data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let out = Tensor::new(vec![n, total_c, h, w], data)?;
        self.push("concat_channels", out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::from_f64(t.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / T::from_f64(ta.numel() as f64);
        self.push("mse", Tensor::scalar(s), Op::Mse(a, b), &[a, b])
    }

    /// Adds a per-(sample, channel) vector `v`: [N,C] to every pixel of
    /// `x`: [N,C,H,W]. This is the only non-scalar broadcast the engine has.
    pub fn add_per_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4("add_per_channel", x)?;
        if self.value(v).shape() != [n, c] {
            return Err(mismatch("add_per_channel", self.value(x), self.value(v)));
        }
        let hw = h * w;
        let mut data = self.value(x).data().to_vec();
        let vv = self.value(v).data();
        for (i, plane) in data.chunks_exact_mut(hw).enumerate() {
            let add = vv[i];
            plane.iter_mut().for_each(|p| *p += add);
        }
        let out = Tensor::new(vec![n, c, h, w], data)?;
        self.push("add_per_channel", out, Op::AddPerChannel { x, v }, &[x, v])
    }

    /// 2×2 average pooling (H and W must be even).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4("avg_pool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidShape {
                op: "avg_pool2",
                shape: self.value(x).shape().to_vec(),
                reason: "spatial extents must be even".into(),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = T::from_f64(0.25);
        let mut data = vec![T::ZERO; n * c * oh * ow];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut data[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    d[y * ow + xx] = (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]) * quarter;
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], data)?;
        self.push("avg_pool2", out, Op::AvgPool2(x), &[x])
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4("upsample2", x)?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut data = vec![T::ZERO; n * c * oh * ow];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut data[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    d[y * ow + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], data)?;
        self.push("upsample2", out, Op::Upsample2(x), &[x])
    }

    /// Spatial window `[rows] × [cols]` of an [N,C,H,W] tensor.
    pub fn crop(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (n, c, h, w) = self.dims4("crop", x)?;
        if rows.start > rows.end || cols.start > cols.end || rows.end > h || cols.end > w {
            return Err(TensorError::InvalidShape {
                op: "crop",
                shape: self.value(x).shape().to_vec(),
                reason: format!("window {rows:?} x {cols:?} out of bounds"),
            });
        }
        let (oh, ow) = (rows.len(), cols.len());
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for y in rows.clone() {
                let base = p * h * w + y * w;
                data.extend_from_slice(&src[base + cols.start..base + cols.end]);
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], data)?;
        self.push("crop", out, Op::Crop { x, rows, cols }, &[x])
    }

    /// Mean over every axis but the first: [N,...] → [N].
    pub fn mean_per_sample(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let Some(&n) = t.shape().first() else {
            return Err(TensorError::InvalidShape {
                op: "mean_per_sample",
                shape: Vec::new(),
                reason: "rank 0".into(),
            });
        };
        let per = t.numel() / n.max(1);
        let inv = T::from_f64(1.0 / per.max(1) as f64);
        let data: Vec<T> = if per == 0 {
            vec![T::ZERO; n]
        } else {
            t.data().chunks_exact(per).map(|c| c.iter().copied().sum::<T>() * inv).collect()
        };
        let out = Tensor::new(vec![n], data)?;
        self.push("mean_per_sample", out, Op::MeanPerSample(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`. Every differentiable leaf gets a
    /// gradient; leaves the loss does not depend on get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyGraph);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::ONE));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let is_leaf = matches!(node.op, Op::Leaf);
            if is_leaf && node.requires_grad {
                if grads[i].is_none() {
                    grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
                }
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let shape_of = |v: Var| self.value(v).shape().to_vec();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Conv2d { x, w, b, k } => {
                let (n, cin, h, wd) = self.value(*x).dims4("conv2d")?;
                let cout = self.value(*w).shape()[0];
                let d = ConvDims {
                    n,
                    cin,
                    cout,
                    h,
                    w: wd,
                    k: *k,
                };
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    &d,
                    self.requires_grad(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(shape_of(*x), dx)?);
                }
                self.accumulate(grads, *w, Tensor::new(shape_of(*w), dw)?);
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::new(shape_of(*b), db)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, fin) = (tx.shape()[0], tx.shape()[1]);
                let fout = tw.shape()[0];
                if self.requires_grad(*x) {
                    let mut dx = vec![T::ZERO; n * fin];
                    T::gemm(n, fout, fin, g.data(), false, tw.data(), false, T::ZERO, &mut dx);
                    self.accumulate(grads, *x, Tensor::new(shape_of(*x), dx)?);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![T::ZERO; fout * fin];
                    T::gemm(fout, n, fin, g.data(), true, tx.data(), false, T::ZERO, &mut dw);
                    self.accumulate(grads, *w, Tensor::new(shape_of(*w), dw)?);
                }
                if let Some(b) = b {
                    let mut db = vec![T::ZERO; fout];
                    for row in g.data().chunks_exact(fout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(shape_of(*b), db)?);
                }
            }
            Op::Silu(a) => {
                let d = zip_map(g, self.value(*a), |gy, x| {
                    let s = sigmoid(x);
                    gy * s * (T::ONE + x * (T::ONE - s))
                });
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = zip_map(g, &node.value, |gy, y| gy * y * (T::ONE - y));
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = zip_map(g, self.value(*a), |gy, x| gy / x);
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = zip_map(g, self.value(*a), |gy, x| {
                    if x > T::ZERO {
                        gy
                    } else if x < T::ZERO {
                        -gy
                    } else {
                        T::ZERO
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let d = zip_map(g, self.value(*x), |gy, v| if v >= lo && v <= hi { gy } else { T::ZERO });
                self.accumulate(grads, *x, d);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                means,
                rstds,
            } => {
                let (n, c, h, w) = self.value(*x).dims4("group_norm")?;
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    means,
                    rstds,
                    g.data(),
                    n,
                    c,
                    h * w,
                    *groups,
                );
                self.accumulate(grads, *x, Tensor::new(shape_of(*x), dx)?);
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?);
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = node.value.dims4("concat_channels")?;
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            let start = (b * total_c + offset) * hw;
                            d.extend_from_slice(&g.data()[start..start + pc * hw]);
                        }
                        self.accumulate(grads, p, Tensor::new(shape_of(p), d)?);
                    }
                    offset += pc;
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let v = g.item() / T::from_f64(n as f64);
                self.accumulate(grads, *a, Tensor::full(shape_of(*a), v));
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, Tensor::full(shape_of(*a), g.item()));
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).numel();
                let k = g.item() * T::from_f64(2.0 / n as f64);
                let d = zip_map(self.value(*a), self.value(*b), |x, y| (x - y) * k);
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, d.map(|v| -v));
                }
                self.accumulate(grads, *a, d);
            }
            Op::AddPerChannel { x, v } => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*v) {
                    let (_, _, h, w) = g.dims4("add_per_channel")?;
                    let dv: Vec<T> = g.data().chunks_exact(h * w).map(|p| p.iter().copied().sum()).collect();
                    self.accumulate(grads, *v, Tensor::new(shape_of(*v), dv)?);
                }
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4("avg_pool2")?;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                let mut d = vec![T::ZERO; n * c * h * w];
                for p in 0..n * c {
                    let gs = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let ds = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            ds[y * w + xx] = gs[(y / 2) * ow + xx / 2] * quarter;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape_of(*x), d)?);
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4("upsample2")?;
                let ow = 2 * w;
                let mut d = vec![T::ZERO; n * c * h * w];
                for p in 0..n * c {
                    let gs = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let ds = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            let i = 2 * y * ow + 2 * xx;
                            ds[y * w + xx] = gs[i] + gs[i + 1] + gs[i + ow] + gs[i + ow + 1];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape_of(*x), d)?);
            }
            Op::Crop { x, rows, cols } => {
                let (n, c, h, w) = self.value(*x).dims4("crop")?;
                let ow = cols.len();
                let mut d = vec![T::ZERO; n * c * h * w];
                let mut src = g.data().chunks_exact(ow.max(1));
                for p in 0..n * c {
                    for y in rows.clone() {
                        let base = p * h * w + y * w;
                        if ow > 0 {
                            let row = src.next().expect("crop gradient rows");
                            d[base + cols.start..base + cols.end].copy_from_slice(row);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape_of(*x), d)?);
            }
            Op::MeanPerSample(x) => {
                let t = self.value(*x);
                let n = t.shape()[0];
                let per = t.numel() / n.max(1);
                let inv = T::from_f64(1.0 / per.max(1) as f64);
                let mut d = Vec::with_capacity(t.numel());
                for &gv in g.data() {
                    d.extend(std::iter::repeat(gv * inv).take(per));
                }
                self.accumulate(grads, *x, Tensor::new(shape_of(*x), d)?);
            }
        }
        Ok(())
    }
}
