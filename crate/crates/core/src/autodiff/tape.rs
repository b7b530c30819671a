use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Operation recorded for one tape node, with whatever the backward pass
/// needs beyond the input values.
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine {
        x: usize,
        scale: f64,
    },
    MatMul(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Sum(usize),
    Mean(usize),
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Upsample {
        x: usize,
        factor: [usize; 3],
    },
    Pad {
        x: usize,
        pads: Vec<(usize, usize)>,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Reshape(usize),
    ScaleShift {
        x: usize,
        scale: usize,
        shift: usize,
        axis: usize,
    },
    Conv {
        x: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        per_level: bool,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        group: usize,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward pass.
///
/// Nodes only ever reference earlier nodes, so the node order is already a
/// topological order and [`Tape::backward`] walks it in reverse. A tape is
/// meant for a single forward/backward pass on one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    first_nonfinite: Cell<Option<usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Per-(group, channel) statistics seen by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    /// `[groups][channels]`.
    pub mean: Vec<f64>,
    /// Biased variance, `[groups][channels]`.
    pub var: Vec<f64>,
    pub groups: usize,
    pub channels: usize,
    /// Values pooled per (group, channel).
    pub count: usize,
}

/// Gradients of a scalar with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }

    pub fn take(&mut self, v: Var<'_>) -> Tensor {
        self.grads
            .get_mut(v.id)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

fn outer_axis_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Output shape of a broadcasting binary op: the shorter shape must be a
/// suffix of the longer one.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] != *short {
        return Err(Error::shape(op, a, b));
    }
    Ok(long.to_vec())
}

/// Sums a broadcast gradient back down to `len` trailing elements.
fn reduce_to(grad: &[f64], len: usize) -> Vec<f64> {
    if grad.len() == len {
        return grad.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in grad.chunks(len) {
        out.iter_mut().zip(chunk).for_each(|(o, g)| *o += g);
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The first node whose value contained a NaN or infinity (debug builds).
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.first_nonfinite.get()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if cfg!(debug_assertions) && self.first_nonfinite.get().is_none() && !value.all_finite() {
            self.first_nonfinite.set(Some(id));
        }
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// A gradient-tracked input (parameter or differentiated input).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// An untracked input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, x: Var<'_>, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let value = x.value().map(f);
        let rg = self.tracked(&[x.id]);
        self.push(value, op, rg)
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var<'_>,
        b: Var<'_>,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'_>> {
        let (av, bv) = (a.value(), b.value());
        let shape = broadcast_shape(name, av.shape(), bv.shape())?;
        let n: usize = shape.iter().product();
        let (al, bl) = (av.len(), bv.len());
        let data = (0..n).map(|i| f(av.data()[i % al], bv.data()[i % bl])).collect();
        let rg = self.tracked(&[a.id, b.id]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            let mut acc = |target: usize, delta: Vec<f64>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(t) => t.data_mut().iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => {
                        *slot = Some(
                            Tensor::new(nodes[target].value.shape().to_vec(), delta)
                                .expect("gradient shape matches value"),
                        )
                    }
                }
            };
            let gd = g.data();
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let (al, bl) = (nodes[*a].value.len(), nodes[*b].value.len());
                    acc(*a, reduce_to(gd, al));
                    let gb: Vec<f64> = reduce_to(gd, bl).into_iter().map(|v| sign * v).collect();
                    acc(*b, gb);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (al, bl) = (av.len(), bv.len());
                    let ga: Vec<f64> = gd.iter().enumerate().map(|(i, g)| g * bv.data()[i % bl]).collect();
                    let gb: Vec<f64> = gd.iter().enumerate().map(|(i, g)| g * av.data()[i % al]).collect();
                    acc(*a, reduce_to(&ga, al));
                    acc(*b, reduce_to(&gb, bl));
                }
                Op::Affine { x, scale } => acc(*x, gd.iter().map(|g| g * scale).collect()),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, nn) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        kernels::gemm(m, nn, k, gd, (nn, 1), bv.data(), (1, nn), 0.0, &mut ga, (k, 1));
                        acc(*a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; k * nn];
                        kernels::gemm(k, m, nn, av.data(), (1, k), gd, (nn, 1), 0.0, &mut gb, (nn, 1));
                        acc(*b, gb);
                    }
                }
                Op::Relu(x) => {
                    let xv = &nodes[*x].value;
                    acc(
                        *x,
                        gd.iter()
                            .zip(xv.data())
                            .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                }
                Op::Sigmoid(x) => acc(*x, gd.iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect()),
                Op::Tanh(x) => acc(*x, gd.iter().zip(out.data()).map(|(g, t)| g * (1.0 - t * t)).collect()),
                Op::Sum(x) => acc(*x, vec![gd[0]; nodes[*x].value.len()]),
                Op::Mean(x) => {
                    let len = nodes[*x].value.len();
                    acc(*x, vec![gd[0] / len as f64; len]);
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = vec![0.0; nodes[*x].value.len()];
                    for (g, &i) in gd.iter().zip(argmax) {
                        gx[i] += g;
                    }
                    acc(*x, gx);
                }
                Op::Upsample { x, factor } => {
                    let xs = nodes[*x].value.shape();
                    let mut gx = vec![0.0; nodes[*x].value.len()];
                    for_each_upsampled(xs, *factor, |src, dst| gx[src] += gd[dst]);
                    acc(*x, gx);
                }
                Op::Pad { x, pads } => {
                    let xs = nodes[*x].value.shape();
                    let mut gx = vec![0.0; nodes[*x].value.len()];
                    for_each_padded(xs, pads, |src, dst| gx[src] = gd[dst]);
                    acc(*x, gx);
                }
                Op::Slice { x, axis, start } => {
                    let xs = nodes[*x].value.shape();
                    let (outer, len, inner) = outer_axis_inner(xs, *axis);
                    let take = out.shape()[*axis];
                    let mut gx = vec![0.0; nodes[*x].value.len()];
                    for o in 0..outer {
                        let src = (o * len + start) * inner;
                        let dst = o * take * inner;
                        gx[src..src + take * inner].copy_from_slice(&gd[dst..dst + take * inner]);
                    }
                    acc(*x, gx);
                }
                Op::Concat { xs, axis } => {
                    let (outer, total, inner) = outer_axis_inner(out.shape(), *axis);
                    let mut offset = 0;
                    for &xi in xs {
                        let len = nodes[xi].value.shape()[*axis];
                        let mut gx = vec![0.0; nodes[xi].value.len()];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            gx[o * len * inner..(o + 1) * len * inner].copy_from_slice(&gd[src..src + len * inner]);
                        }
                        acc(xi, gx);
                        offset += len;
                    }
                }
                Op::Reshape(x) => acc(*x, gd.to_vec()),
                Op::ScaleShift { x, scale, shift, axis } => {
                    let xv = &nodes[*x].value;
                    let sv = &nodes[*scale].value;
                    let mid = sv.len();
                    let outer: usize = xv.shape()[..*axis].iter().product();
                    let inner = xv.len() / (outer * mid);
                    let mut gx = vec![0.0; xv.len()];
                    let mut gs = vec![0.0; mid];
                    let mut gt = vec![0.0; mid];
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            let s = sv.data()[m];
                            for i in base..base + inner {
                                gx[i] = gd[i] * s;
                                gs[m] += gd[i] * xv.data()[i];
                                gt[m] += gd[i];
                            }
                        }
                    }
                    acc(*x, gx);
                    acc(*scale, gs);
                    acc(*shift, gt);
                }
                Op::Conv {
                    x,
                    weight,
                    bias,
                    geom,
                    per_level,
                } => {
                    let xv = &nodes[*x].value;
                    let wv = &nodes[*weight].value;
                    let batch = xv.len() / (geom.c_in * geom.volume());
                    let in_len = geom.c_in * geom.volume();
                    let out_len = geom.c_out * geom.volume();
                    let mut gx = nodes[*x].requires_grad.then(|| vec![0.0; xv.len()]);
                    let mut gw = nodes[*weight].requires_grad.then(|| vec![0.0; wv.len()]);
                    let mut gb = bias
                        .filter(|b| nodes[*b].requires_grad)
                        .map(|b| vec![0.0; nodes[b].value.len()]);
                    let mut cols = Vec::new();
                    for s in 0..batch {
                        kernels::conv_backward(
                            geom,
                            *per_level,
                            &xv.data()[s * in_len..(s + 1) * in_len],
                            wv.data(),
                            &gd[s * out_len..(s + 1) * out_len],
                            gx.as_mut().map(|v| &mut v[s * in_len..(s + 1) * in_len]),
                            gw.as_deref_mut(),
                            gb.as_deref_mut(),
                            &mut cols,
                        );
                    }
                    if let Some(v) = gx {
                        acc(*x, v);
                    }
                    if let Some(v) = gw {
                        acc(*weight, v);
                    }
                    if let (Some(b), Some(v)) = (bias, gb) {
                        acc(*b, v);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    group,
                } => {
                    let xs = nodes[*x].value.shape();
                    let (n, c) = (xs[0], xs[1]);
                    let inner: usize = xs[2..].iter().product();
                    let gam = nodes[*gamma].value.data();
                    let count = (group * inner) as f64;
                    let mut gx = vec![0.0; xhat.len()];
                    let mut gg = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    for grp in 0..n / group {
                        for ch in 0..c {
                            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                            for s in grp * group..(grp + 1) * group {
                                let base = (s * c + ch) * inner;
                                for i in base..base + inner {
                                    sum_dy += gd[i];
                                    sum_dy_xhat += gd[i] * xhat[i];
                                }
                            }
                            gg[ch] += sum_dy_xhat;
                            gbeta[ch] += sum_dy;
                            let k = gam[ch] * inv_std[grp * c + ch] / count;
                            for s in grp * group..(grp + 1) * group {
                                let base = (s * c + ch) * inner;
                                for i in base..base + inner {
                                    gx[i] = k * (count * gd[i] - sum_dy - xhat[i] * sum_dy_xhat);
                                }
                            }
                        }
                    }
                    acc(*x, gx);
                    acc(*gamma, gg);
                    acc(*beta, gbeta);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Calls `f(source_index, dest_index)` for nearest-neighbour upsampling of the
/// last three axes.
fn for_each_upsampled(shape: &[usize], factor: [usize; 3], mut f: impl FnMut(usize, usize)) {
    let nd = shape.len();
    let (d, h, w) = (shape[nd - 3], shape[nd - 2], shape[nd - 1]);
    let outer: usize = shape[..nd - 3].iter().product();
    let (od, oh, ow) = (d * factor[0], h * factor[1], w * factor[2]);
    for o in 0..outer {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let src = ((o * d + z / factor[0]) * h + y / factor[1]) * w + x / factor[2];
                    let dst = ((o * od + z) * oh + y) * ow + x;
                    f(src, dst);
                }
            }
        }
    }
}

/// Calls `f(source_index, dest_index)` for every source element of a
/// zero-pad.
fn for_each_padded(shape: &[usize], pads: &[(usize, usize)], mut f: impl FnMut(usize, usize)) {
    let out_shape: Vec<usize> = shape.iter().zip(pads).map(|(s, (a, b))| s + a + b).collect();
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for src in 0..n {
        let mut dst = 0;
        for ax in 0..shape.len() {
            dst = dst * out_shape[ax] + idx[ax] + pads[ax].0;
        }
        f(src, dst);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.tracked(&[self.id])
    }

    /// Elementwise sum; `other` may broadcast over leading axes (or vice versa).
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape
            .binary("add", self, other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape
            .binary("sub", self, other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape
            .binary("mul", self, other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// `scale · x + shift` with scalar constants.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        self.tape
            .unary(self, Op::Affine { x: self.id, scale }, |v| scale * v + shift)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out, (n, 1));
        let rg = self.tape.tracked(&[self.id, other.id]);
        Ok(self
            .tape
            .push(Tensor::new(vec![m, n], out)?, Op::MatMul(self.id, other.id), rg))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self, Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self, Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self, Op::Tanh(self.id), f64::tanh)
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.value().data().iter().sum();
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(v), Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let value = self.value();
        let v = value.data().iter().sum::<f64>() / value.len() as f64;
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(v), Op::Mean(self.id), rg)
    }

    /// Max over non-overlapping windows of the last three axes. Ties go to the
    /// first maximal element in row-major window order.
    pub fn max_pool(self, window: [usize; 3]) -> Result<Var<'t>> {
        let xv = self.value();
        let s = xv.shape();
        let nd = s.len();
        if nd < 3 || window.contains(&0) || (0..3).any(|i| s[nd - 3 + i] % window[i] != 0) {
            return Err(Error::shape("max_pool", s, &window));
        }
        let (d, h, w) = (s[nd - 3], s[nd - 2], s[nd - 1]);
        let (od, oh, ow) = (d / window[0], h / window[1], w / window[2]);
        let outer: usize = s[..nd - 3].iter().product();
        let mut out = Vec::with_capacity(outer * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for o in 0..outer {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = usize::MAX;
                        for a in 0..window[0] {
                            for b in 0..window[1] {
                                for c in 0..window[2] {
                                    let i =
                                        ((o * d + z * window[0] + a) * h + y * window[1] + b) * w + x * window[2] + c;
                                    let v = xv.data()[i];
                                    if best_i == usize::MAX || v > best {
                                        best = v;
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i);
                    }
                }
            }
        }
        let mut shape = s[..nd - 3].to_vec();
        shape.extend([od, oh, ow]);
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(Tensor::new(shape, out)?, Op::MaxPool { x: self.id, argmax }, rg))
    }

    /// Nearest-neighbour replication over the last three axes.
    pub fn upsample(self, factor: [usize; 3]) -> Result<Var<'t>> {
        let xv = self.value();
        let s = xv.shape();
        let nd = s.len();
        if nd < 3 || factor.contains(&0) {
            return Err(Error::shape("upsample", s, &factor));
        }
        let mut shape = s.to_vec();
        for i in 0..3 {
            shape[nd - 3 + i] *= factor[i];
        }
        let mut out = vec![0.0; shape.iter().product()];
        for_each_upsampled(s, factor, |src, dst| out[dst] = xv.data()[src]);
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(Tensor::new(shape, out)?, Op::Upsample { x: self.id, factor }, rg))
    }

    /// Zero padding with `(before, after)` per axis.
    pub fn pad(self, pads: &[(usize, usize)]) -> Result<Var<'t>> {
        let xv = self.value();
        let s = xv.shape();
        if pads.len() != s.len() {
            let flat: Vec<usize> = pads.iter().flat_map(|&(a, b)| [a, b]).collect();
            return Err(Error::shape("pad", s, &flat));
        }
        let shape: Vec<usize> = s.iter().zip(pads).map(|(n, (a, b))| n + a + b).collect();
        let mut out = vec![0.0; shape.iter().product()];
        for_each_padded(s, pads, |src, dst| out[dst] = xv.data()[src]);
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::new(shape, out)?,
            Op::Pad {
                x: self.id,
                pads: pads.to_vec(),
            },
            rg,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let s = xv.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape("slice", s, &[axis, start, len]));
        }
        let (outer, n, inner) = outer_axis_inner(s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * n + start) * inner;
            out.extend_from_slice(&xv.data()[src..src + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::new(shape, out)?,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// `x · scale + shift`, where `scale` and `shift` share the shape of
    /// `x.shape[axis..axis + k]` and broadcast over all other axes.
    pub fn scale_shift(self, scale: Var<'t>, shift: Var<'t>, axis: usize) -> Result<Var<'t>> {
        let (xv, sv, tv) = (self.value(), scale.value(), shift.value());
        let xs = xv.shape();
        let k = sv.ndim();
        if sv.shape() != tv.shape() || axis + k > xs.len() || xs[axis..axis + k] != *sv.shape() {
            return Err(Error::shape("scale_shift", xs, sv.shape()));
        }
        let mid = sv.len();
        let outer: usize = xs[..axis].iter().product();
        let inner = xv.len() / (outer * mid).max(1);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let (s, t) = (sv.data()[m], tv.data()[m]);
                for i in base..base + inner {
                    out[i] = xv.data()[i] * s + t;
                }
            }
        }
        let rg = self.tape.tracked(&[self.id, scale.id, shift.id]);
        Ok(self.tape.push(
            Tensor::new(xs.to_vec(), out)?,
            Op::ScaleShift {
                x: self.id,
                scale: scale.id,
                shift: shift.id,
                axis,
            },
            rg,
        ))
    }
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<'t>(xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = xs.first().ok_or_else(|| Error::invalid("concat: no inputs"))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = xs.iter().map(|v| v.value()).collect();
    let s0 = values[0].shape();
    if axis >= s0.len() {
        return Err(Error::shape("concat", s0, &[axis]));
    }
    for v in &values[1..] {
        let s = v.shape();
        if s.len() != s0.len() || (0..s.len()).any(|i| i != axis && s[i] != s0[i]) {
            return Err(Error::shape("concat", s0, s));
        }
    }
    let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
    let (outer, _, inner) = outer_axis_inner(s0, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let len = v.shape()[axis] * inner;
            out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = s0.to_vec();
    shape[axis] = total;
    let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
    let rg = tape.tracked(&ids);
    Ok(tape.push(Tensor::new(shape, out)?, Op::Concat { xs: ids, axis }, rg))
}

/// Splits an input of shape `[N][C][D][H][W]` (or `[C][D][H][W]`) into
/// `(batch, geometry)` given a weight's channel and kernel extents.
fn conv_geom(
    op: &'static str,
    x: &[usize],
    c_out: usize,
    c_in: usize,
    kernel: [usize; 3],
) -> Result<(usize, ConvGeom)> {
    let (batch, rest) = match x.len() {
        4 => (1, x),
        5 => (x[0], &x[1..]),
        _ => return Err(Error::shape(op, x, &[c_out, c_in])),
    };
    if rest[0] != c_in {
        return Err(Error::shape(op, x, &[c_out, c_in]));
    }
    if kernel.iter().any(|k| k % 2 == 0) {
        return Err(Error::shape(op, &kernel, &[]));
    }
    Ok((
        batch,
        ConvGeom {
            c_in,
            c_out,
            depth: rest[1],
            height: rest[2],
            width: rest[3],
            kernel,
        },
    ))
}

fn conv_impl<'t>(
    op: &'static str,
    x: Var<'t>,
    weight: Var<'t>,
    bias: Option<Var<'t>>,
    per_level: bool,
) -> Result<Var<'t>> {
    let tape = x.tape;
    let (xv, wv) = (x.value(), weight.value());
    let ws = wv.shape();
    let (ws_core, levels) = if per_level {
        if ws.len() != 6 {
            return Err(Error::shape(op, xv.shape(), ws));
        }
        (&ws[1..], Some(ws[0]))
    } else {
        if ws.len() != 5 {
            return Err(Error::shape(op, xv.shape(), ws));
        }
        (ws, None)
    };
    let (batch, geom) = conv_geom(
        op,
        xv.shape(),
        ws_core[0],
        ws_core[1],
        [ws_core[2], ws_core[3], ws_core[4]],
    )?;
    if let Some(p) = levels {
        if p != geom.depth {
            return Err(Error::shape(op, xv.shape(), ws));
        }
    }
    let bias_value = bias.map(|b| b.value());
    if let Some(bv) = &bias_value {
        let want: Vec<usize> = match levels {
            Some(p) => vec![p, geom.c_out],
            None => vec![geom.c_out],
        };
        if bv.shape() != want {
            return Err(Error::shape(op, bv.shape(), &want));
        }
    }
    let in_len = geom.c_in * geom.volume();
    let out_len = geom.c_out * geom.volume();
    let mut out = vec![0.0; batch * out_len];
    let mut cols = Vec::new();
    for s in 0..batch {
        kernels::conv_forward(
            &geom,
            per_level,
            &xv.data()[s * in_len..(s + 1) * in_len],
            wv.data(),
            bias_value.as_ref().map(|b| b.data()),
            &mut cols,
            &mut out[s * out_len..(s + 1) * out_len],
        );
    }
    let mut shape = xv.shape().to_vec();
    let c_axis = shape.len() - 4;
    shape[c_axis] = geom.c_out;
    let mut ids = vec![x.id, weight.id];
    ids.extend(bias.map(|b| b.id));
    let rg = tape.tracked(&ids);
    Ok(tape.push(
        Tensor::new(shape, out)?,
        Op::Conv {
            x: x.id,
            weight: weight.id,
            bias: bias.map(|b| b.id),
            geom,
            per_level,
        },
        rg,
    ))
}

/// Same-padded, stride-1 3-D cross-correlation.
///
/// `x` is `[N][C_in][D][H][W]` or `[C_in][D][H][W]`, `weight` is
/// `[C_out][C_in][kd][kh][kw]` with odd extents and `bias` is `[C_out]`.
pub fn conv3d<'t>(x: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
    conv_impl("conv3d", x, weight, bias, false)
}

/// Depth-unshared variant of [`conv3d`]: output level `p` uses kernel set
/// `weight[p]` (`[D][C_out][C_in][kd][kh][kw]`) and `bias[p]` (`[D][C_out]`).
pub fn conv3d_per_level<'t>(x: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
    conv_impl("conv_full", x, weight, bias, true)
}

/// Training-mode batch normalization over `[N][C][...]`.
///
/// Statistics are taken per channel over consecutive groups of `group`
/// samples (pooling every trailing axis); `group == N` is ordinary batch
/// normalization.
pub fn batch_norm<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    group: usize,
    eps: f64,
) -> Result<(Var<'t>, BatchStats)> {
    let tape = x.tape;
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    let s = xv.shape();
    if s.len() < 2 || group == 0 || s[0] % group != 0 {
        return Err(Error::shape("batchnorm", s, &[group]));
    }
    let (n, c) = (s[0], s[1]);
    if gv.shape() != [c] || bv.shape() != [c] {
        return Err(Error::shape("batchnorm", gv.shape(), &[c]));
    }
    let inner: usize = s[2..].iter().product();
    let groups = n / group;
    let count = group * inner;
    let mut mean = vec![0.0; groups * c];
    let mut var = vec![0.0; groups * c];
    let mut inv_std = vec![0.0; groups * c];
    let mut xhat = vec![0.0; xv.len()];
    let mut out = vec![0.0; xv.len()];
    let d = xv.data();
    for grp in 0..groups {
        for ch in 0..c {
            let idx = || {
                (grp * group..(grp + 1) * group).flat_map(move |smp| {
                    let base = (smp * c + ch) * inner;
                    base..base + inner
                })
            };
            let m = idx().map(|i| d[i]).sum::<f64>() / count as f64;
            let v = idx().map(|i| (d[i] - m) * (d[i] - m)).sum::<f64>() / count as f64;
            let is = 1.0 / (v + eps).sqrt();
            let k = grp * c + ch;
            mean[k] = m;
            var[k] = v;
            inv_std[k] = is;
            let (g, b) = (gv.data()[ch], bv.data()[ch]);
            for i in idx() {
                xhat[i] = (d[i] - m) * is;
                out[i] = g * xhat[i] + b;
            }
        }
    }
    let rg = tape.tracked(&[x.id, gamma.id, beta.id]);
    let y = tape.push(
        Tensor::new(s.to_vec(), out)?,
        Op::BatchNorm {
            x: x.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
            group,
        },
        rg,
    );
    Ok((
        y,
        BatchStats {
            mean,
            var,
            groups,
            channels: c,
            count,
        },
    ))
}
