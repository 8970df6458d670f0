//! Reverse-mode recording tape.
//!
//! Every primitive evaluates eagerly, pushes a node holding its value and
//! enough saved state for the adjoint, and returns a [`Var`] handle. One
//! backward sweep over the nodes in reverse insertion order produces
//! gradients for every node that depends on a gradient-requiring leaf.

use std::fmt;

use super::conv;
use super::tensor::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward is computed outside the tape but whose
/// adjoint the tape must call.
pub trait CustomOp<T: Real>: Send {
    fn name(&self) -> &'static str;

    /// Gradients for each input, `None` where `need[i]` is false.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, dy: &Tensor<T>, need: &[bool]) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    ConvTranspose3d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
        x: Var,
    },
    Log {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    AvgPool2 {
        x: Var,
    },
    NearestDown2 {
        x: Var,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::ConvTranspose3d { .. } => "conv_transpose3d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Log { .. } => "log",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Gather { .. } => "channel_gather",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::AvgPool2 { .. } => "avg_pool2",
            Op::NearestDown2 { .. } => "nearest_down2",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Instance-norm variance floor.
pub const NORM_EPS: f64 = 1e-5;

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn spatial_dims(shape: &[usize]) -> Option<[usize; 3]> {
    (shape.len() == 4).then(|| [shape[1], shape[2], shape[3]])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf (inputs, targets, detached copies).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: a constant copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 5 || ws[1] != xs[0] || ws[2] != ws[3] || ws[3] != ws[4] || ws[2] % 2 == 0 {
            return Err(shape_err("conv3d", format!("input {xs:?}, weight {ws:?}")));
        }
        if stride == 0 || (stride > 1 && xs[1..].iter().any(|d| d % stride != 0)) {
            return Err(shape_err("conv3d", format!("input {xs:?} not divisible by stride {stride}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv3d", format!("bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let out = conv::conv3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride);
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.any_grad(&deps);
        Ok(self.push(out, Op::Conv3d { x, w, b, stride }, ng))
    }

    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 5 || ws[0] != xs[0] || ws[2..] != [2, 2, 2] {
            return Err(shape_err("conv_transpose3d", format!("input {xs:?}, weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(shape_err("conv_transpose3d", format!("bias {:?}", self.shape(b))));
            }
        }
        let out = conv::conv_transpose3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.any_grad(&deps);
        Ok(self.push(out, Op::ConvTranspose3d { x, w, b }, ng))
    }

    /// Per-channel normalization over the spatial extent, then affine.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.channels();
        if xv.shape().len() < 2 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "instance_norm",
                format!("input {:?}, gamma {:?}, beta {:?}", xv.shape(), self.shape(gamma), self.shape(beta)),
            ));
        }
        let p = xv.plane();
        let n = T::lit(p as f64);
        let eps = T::lit(NORM_EPS);
        let mut xhat = Tensor::zeros(xv.shape());
        let mut inv_std = Vec::with_capacity(c);
        for (ch, (src, dst)) in xv.data().chunks(p).zip(xhat.data_mut().chunks_mut(p)).enumerate() {
            let _ = ch;
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for (ch, dst) in out.data_mut().chunks_mut(p).enumerate() {
            for d in dst.iter_mut() {
                *d = *d * g[ch] + b[ch];
            }
        }
        let ng = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        let ng = self.any_grad(&[x]);
        self.push(out, Op::LeakyRelu { x, slope: s }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid { x }, ng)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::InvalidArgument("log of non-positive value".into()));
        }
        let out = self.value(x).map(|v| v.ln());
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::Log { x }, ng))
    }

    /// `[C, ...] -> [C]` mean over all trailing axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() < 2 || xv.plane() == 0 {
            return Err(shape_err("global_avg_pool", format!("input {:?}", xv.shape())));
        }
        let n = T::lit(xv.plane() as f64);
        let mut out = conv::channel_sums(xv);
        for v in out.data_mut() {
            *v = *v / n;
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool { x }, ng))
    }

    /// `x: [in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(shape_err("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        let (o, i) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); o];
        for (r, dst) in out.iter_mut().enumerate() {
            let mut acc = b.map(|b| self.value(b).data()[r]).unwrap_or(T::zero());
            for c in 0..i {
                acc += wv[r * i + c] * xv[c];
            }
            *dst = acc;
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.any_grad(&deps);
        Ok(self.push(Tensor::from_vec(&[o], out), Op::Linear { x, w, b }, ng))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.shape().len() || xv.shape()[axis] == 0 {
            return Err(shape_err("softmax", format!("axis {axis} of {:?}", xv.shape())));
        }
        let out = softmax_axis(xv, axis);
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * n..(o + 1) * n]);
            }
        }
        let ng = self.any_grad(xs);
        Ok(self.push(Tensor::from_vec(&shape, data), Op::Concat { xs: xs.to_vec(), axis }, ng))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("narrow", format!("[{start}, {}) of axis {axis} in {shape:?}", start + len)));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_vec(&out_shape, data), Op::Narrow { x, axis, start }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bv) {
            *o *= y;
        }
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.value(x).map(|v| v * c);
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Scale { x, c }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let out = Tensor::scalar(self.value(x).sum() / T::lit(n as f64));
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::Mean { x }, ng))
    }

    /// `y[c] = x[index[c]]` along the leading axis.
    pub fn channel_gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.channels();
        if index.iter().any(|&i| i >= c) {
            return Err(shape_err("channel_gather", format!("index out of range for {c} channels")));
        }
        let p = xv.plane();
        let mut shape = xv.shape().to_vec();
        if shape.is_empty() {
            return Err(shape_err("channel_gather", "scalar input"));
        }
        shape[0] = index.len();
        let mut data = Vec::with_capacity(index.len() * p);
        for &i in index {
            data.extend_from_slice(&xv.data()[i * p..(i + 1) * p]);
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_vec(&shape, data),
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    /// `y[c, ...] = s[c] * x[c, ...]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.value(x).channels();
        if self.shape(s) != [c] {
            return Err(shape_err("scale_channels", format!("{:?} for {c} channels", self.shape(s))));
        }
        let p = self.value(x).plane();
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for (ch, chunk) in out.data_mut().chunks_mut(p).enumerate() {
            for v in chunk {
                *v *= sv[ch];
            }
        }
        let ng = self.any_grad(&[x, s]);
        Ok(self.push(out, Op::ScaleChannels { x, s }, ng))
    }

    fn pool_shape(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        let s = self.shape(x);
        match spatial_dims(s) {
            Some(d) if d.iter().all(|v| v % 2 == 0 && *v > 0) => Ok([s[0], d[0] / 2, d[1] / 2, d[2] / 2]),
            _ => Err(shape_err(op, format!("input {s:?} needs even spatial extents"))),
        }
    }

    /// Mean over each 2×2×2 block.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let os = self.pool_shape("avg_pool2", x)?;
        let xs = self.shape(x).to_vec();
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&os);
        let eighth = T::lit(0.125);
        let dst = out.data_mut();
        for_each_block(&xs, |o, i| dst[o] += src[i] * eighth);
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::AvgPool2 { x }, ng))
    }

    /// Keeps the first voxel of each 2×2×2 block.
    pub fn nearest_down2(&mut self, x: Var) -> Result<Var> {
        let os = self.pool_shape("nearest_down2", x)?;
        let xs = self.shape(x).to_vec();
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&os);
        let dst = out.data_mut();
        for_each_anchor(&xs, |o, i| dst[o] = src[i]);
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::NearestDown2 { x }, ng))
    }

    /// Records a node whose value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let ng = self.any_grad(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(shape_err("backward", format!("non-scalar output {:?}", self.shape(output))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.shape(output), T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let need = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, stride } => {
                let g = conv::conv3d_backward(
                    self.value(*x),
                    self.value(*w),
                    dy,
                    *stride,
                    [need(*x), need(*w), b.is_some_and(need)],
                );
                accumulate_opt(grads, *x, g.dx);
                accumulate_opt(grads, *w, g.dw);
                if let Some(b) = b {
                    accumulate_opt(grads, *b, g.db);
                }
            }
            Op::ConvTranspose3d { x, w, b } => {
                let g = conv::conv_transpose3d_backward(
                    self.value(*x),
                    self.value(*w),
                    dy,
                    [need(*x), need(*w), b.is_some_and(need)],
                );
                accumulate_opt(grads, *x, g.dx);
                accumulate_opt(grads, *w, g.dw);
                if let Some(b) = b {
                    accumulate_opt(grads, *b, g.db);
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let p = xhat.plane();
                let n = T::lit(p as f64);
                let g = self.value(*gamma).data();
                if need(*gamma) || need(*beta) {
                    let mut dg = Tensor::zeros(&[g.len()]);
                    let mut db = Tensor::zeros(&[g.len()]);
                    for (c, (dyc, xc)) in dy.data().chunks(p).zip(xhat.data().chunks(p)).enumerate() {
                        dg.data_mut()[c] = dyc.iter().zip(xc).map(|(&a, &b)| a * b).sum();
                        db.data_mut()[c] = dyc.iter().copied().sum();
                    }
                    if need(*gamma) {
                        accumulate(grads, *gamma, dg);
                    }
                    if need(*beta) {
                        accumulate(grads, *beta, db);
                    }
                }
                if need(*x) {
                    let mut dx = Tensor::zeros(xhat.shape());
                    for (c, ((dyc, xc), dst)) in dy
                        .data()
                        .chunks(p)
                        .zip(xhat.data().chunks(p))
                        .zip(dx.data_mut().chunks_mut(p))
                        .enumerate()
                    {
                        let sum_d: T = dyc.iter().copied().sum::<T>() * g[c];
                        let sum_dx: T = dyc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>() * g[c];
                        let k = inv_std[c] / n;
                        for ((o, &d), &xh) in dst.iter_mut().zip(dyc).zip(xc) {
                            *o = k * (n * d * g[c] - sum_d - xh * sum_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let mut dx = dy.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv) {
                    if v <= T::zero() {
                        *d *= *slope;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let mut dx = dy.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (T::one() - y);
                }
                accumulate(grads, *x, dx);
            }
            Op::Log { x } => {
                let mut dx = dy.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *d = *d / v;
                }
                accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let p = xv.plane();
                let n = T::lit(p as f64);
                let mut dx = Tensor::zeros(xv.shape());
                for (c, chunk) in dx.data_mut().chunks_mut(p).enumerate() {
                    chunk.fill(dy.data()[c] / n);
                }
                accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w);
                let (o, i) = (wv.shape()[0], wv.shape()[1]);
                let dyv = dy.data();
                if need(*x) {
                    let mut dx = Tensor::zeros(&[i]);
                    for r in 0..o {
                        for c in 0..i {
                            dx.data_mut()[c] += wv.data()[r * i + c] * dyv[r];
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if need(*w) {
                    let mut dw = Tensor::zeros(&[o, i]);
                    for r in 0..o {
                        for c in 0..i {
                            dw.data_mut()[r * i + c] = dyv[r] * xv[c];
                        }
                    }
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if need(*b) {
                        accumulate(grads, *b, dy.clone());
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let mut dx = Tensor::zeros(y.shape());
                let (yd, dyd) = (y.data(), dy.data());
                let dxd = dx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: T = (0..n).map(|k| yd[at(k)] * dyd[at(k)]).sum();
                        for k in 0..n {
                            dxd[at(k)] = yd[at(k)] * (dyd[at(k)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if need(v) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&dy.data()[base..base + len * inner]);
                        }
                        accumulate(grads, v, Tensor::from_vec(self.shape(v), part));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = split_axis(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = Tensor::zeros(xs);
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    dx.data_mut()[dst..dst + len * inner].copy_from_slice(&dy.data()[src..src + len * inner]);
                }
                accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                if need(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if need(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Mul { a, b } => {
                if need(*a) {
                    let mut da = dy.clone();
                    for (d, &v) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *d *= v;
                    }
                    accumulate(grads, *a, da);
                }
                if need(*b) {
                    let mut db = dy.clone();
                    for (d, &v) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *d *= v;
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Scale { x, c } => {
                accumulate(grads, *x, dy.map(|v| v * *c));
            }
            Op::Sum { x } => {
                accumulate(grads, *x, Tensor::full(self.shape(*x), dy.item()));
            }
            Op::Mean { x } => {
                let n = T::lit(self.value(*x).numel() as f64);
                accumulate(grads, *x, Tensor::full(self.shape(*x), dy.item() / n));
            }
            Op::Gather { x, index } => {
                let xs = self.shape(*x);
                let p = self.value(*x).plane();
                let mut dx = Tensor::zeros(xs);
                for (c, &src) in index.iter().enumerate() {
                    let d = &dy.data()[c * p..(c + 1) * p];
                    for (o, &v) in dx.data_mut()[src * p..(src + 1) * p].iter_mut().zip(d) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ScaleChannels { x, s } => {
                let xv = self.value(*x);
                let p = xv.plane();
                let sv = self.value(*s).data();
                if need(*x) {
                    let mut dx = dy.clone();
                    for (c, chunk) in dx.data_mut().chunks_mut(p).enumerate() {
                        for v in chunk {
                            *v *= sv[c];
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if need(*s) {
                    let ds: Vec<T> = dy
                        .data()
                        .chunks(p)
                        .zip(xv.data().chunks(p))
                        .map(|(a, b)| a.iter().zip(b).map(|(&u, &v)| u * v).sum())
                        .collect();
                    accumulate(grads, *s, Tensor::from_vec(&[sv.len()], ds));
                }
            }
            Op::AvgPool2 { x } => {
                let xs = self.shape(*x).to_vec();
                let mut dx = Tensor::zeros(&xs);
                let eighth = T::lit(0.125);
                let src = dy.data();
                let dst = dx.data_mut();
                for_each_block(&xs, |o, i| dst[i] = src[o] * eighth);
                accumulate(grads, *x, dx);
            }
            Op::NearestDown2 { x } => {
                let xs = self.shape(*x).to_vec();
                let mut dx = Tensor::zeros(&xs);
                let src = dy.data();
                let dst = dx.data_mut();
                for_each_anchor(&xs, |o, i| dst[i] = src[o]);
                accumulate(grads, *x, dx);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| need(*v)).collect();
                let gs = op.backward(&values, &node.value, dy, &needs);
                for ((v, g), n) in inputs.iter().zip(gs).zip(needs) {
                    if n {
                        let g = g.ok_or_else(|| Error::Contract(format!("{} returned no gradient", op.name())))?;
                        if g.shape() != self.shape(*v) {
                            return Err(shape_err("custom backward", format!("{} gradient shape", op.name())));
                        }
                        accumulate(grads, *v, g);
                    }
                }
            }
        }
        Ok(())
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_opt<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Option<Tensor<T>>) {
    if let Some(g) = g {
        accumulate(grads, v, g);
    }
}

/// Calls `f(out_index, in_index)` for every input voxel of 2×2×2 blocks.
fn for_each_block(shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let o = ((ch * od + z / 2) * oh + y / 2) * ow + x / 2;
                    let i = ((ch * d + z) * h + y) * w + x;
                    f(o, i);
                }
            }
        }
    }
}

/// Calls `f(out_index, in_index)` for the first voxel of each block.
fn for_each_anchor(shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let o = ((ch * od + z) * oh + y) * ow + x;
                    let i = ((ch * d + 2 * z) * h + 2 * y) * w + 2 * x;
                    f(o, i);
                }
            }
        }
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax_axis<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut m = src[at(0)];
            for k in 1..n {
                m = m.max(src[at(k)]);
            }
            let mut z = T::zero();
            for k in 0..n {
                let e = (src[at(k)] - m).exp();
                dst[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                dst[at(k)] = dst[at(k)] / z;
            }
        }
    }
    out
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
