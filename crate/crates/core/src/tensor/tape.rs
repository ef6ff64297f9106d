use std::cell::{Ref, RefCell};

use super::kernels::{self, ConvGeometry};
use super::{check_same_shape, Tensor};
use crate::error::{bail, Result};

/// Per-channel mean and biased variance observed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Abs(usize),
    Square(usize),
    Powf(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Ln(usize),
    SoftmaxChannels(usize),
    Sum(usize),
    Mean(usize),
    MeanAxis {
        input: usize,
        axis: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    PadSpatial {
        input: usize,
        pad: usize,
    },
    Reshape(usize),
    Permute {
        input: usize,
        perm: Vec<usize>,
    },
    Conv {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    BilinearSample {
        image: usize,
        coords: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records tensor operations in execution order for reverse-mode differentiation.
///
/// Nodes are appended as operations run, so node ids are a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each flat output index of the permuted tensor, the flat input index.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let src: usize = idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum();
        map.push(src);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<Var<'_>> {
        value.ensure_finite(what)?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Record a leaf. Gradients are tracked when `tensor.requires_grad` is set.
    pub fn leaf(&self, mut tensor: Tensor) -> Result<Var<'_>> {
        let rg = tensor.requires_grad;
        tensor.requires_grad = false;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, rg, "leaf")
    }

    /// Leaf with gradient tracking.
    pub fn param(&self, tensor: Tensor) -> Result<Var<'_>> {
        self.leaf(tensor.with_grad())
    }

    /// Leaf without gradient tracking.
    pub fn constant(&self, mut tensor: Tensor) -> Result<Var<'_>> {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Propagate d`loss`/d(leaf) into every gradient-tracking leaf.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            bail!(Contract, "loss belongs to a different tape");
        }
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            if nodes[loss.id].value.numel() != 1 {
                bail!(
                    Contract,
                    "backward needs a scalar loss, got shape {:?}",
                    nodes[loss.id].value.shape()
                );
            }
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
            grads[loss.id] = Some(vec![1.0]);
            let mut leaf_grads = Vec::new();
            for id in (0..=loss.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                if !nodes[id].requires_grad {
                    continue;
                }
                if let Op::Leaf = nodes[id].op {
                    leaf_grads.push((id, g));
                } else {
                    propagate(&nodes, id, &g, &mut grads);
                }
            }
            leaf_grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let gb = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                accumulate(nodes, grads, *a, gb);
            }
            if needs(*b) {
                let ga = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                accumulate(nodes, grads, *b, ga);
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.iter().map(|v| v * s).collect()),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Abs(a) => {
            let d = g
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| {
                    if *x > 0.0 {
                        *g
                    } else if *x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Square(a) => {
            let d = g
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| 2.0 * x * g)
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Powf(a, p) => {
            let d = g
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| g * p * x.powf(p - 1.0))
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Relu(a) => {
            let d = g
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Sigmoid(a) => {
            let d = g
                .iter()
                .zip(out.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Tanh(a) => {
            let d = g
                .iter()
                .zip(out.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Ln(a) => {
            let d = g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::SoftmaxChannels(a) => {
            let (b, c, inner) = kernels::channel_layout(out.shape());
            let s = out.data();
            let mut d = vec![0.0; s.len()];
            for bi in 0..b {
                for i in 0..inner {
                    let at = |ch: usize| (bi * c + ch) * inner + i;
                    let dot: f64 = (0..c).map(|ch| g[at(ch)] * s[at(ch)]).sum();
                    for ch in 0..c {
                        d[at(ch)] = s[at(ch)] * (g[at(ch)] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, vec![g[0]; val(*a).numel()]),
        Op::Mean(a) => {
            let n = val(*a).numel();
            accumulate(nodes, grads, *a, vec![g[0] / n as f64; n]);
        }
        Op::MeanAxis { input, axis } => {
            let shape = val(*input).shape();
            let (outer, dim, inner) = axis_split(shape, *axis);
            let mut d = vec![0.0; outer * dim * inner];
            for o in 0..outer {
                for k in 0..dim {
                    for i in 0..inner {
                        d[(o * dim + k) * inner + i] = g[o * inner + i] / dim as f64;
                    }
                }
            }
            accumulate(nodes, grads, *input, d);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            for &inp in inputs {
                let dim = val(inp).shape()[*axis];
                if needs(inp) {
                    let mut d = Vec::with_capacity(outer * dim * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + dim * inner]);
                    }
                    accumulate(nodes, grads, inp, d);
                }
                offset += dim;
            }
        }
        Op::Slice { input, axis, start } => {
            let (outer, dim, inner) = axis_split(val(*input).shape(), *axis);
            let len = out.shape()[*axis];
            let mut d = vec![0.0; outer * dim * inner];
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                d[dst..dst + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(nodes, grads, *input, d);
        }
        Op::PadSpatial { input, pad } => {
            let s = val(*input).shape();
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let planes: usize = s[..s.len() - 2].iter().product();
            let (ph, pw) = (h + 2 * pad, w + 2 * pad);
            let mut d = vec![0.0; planes * h * w];
            for p in 0..planes {
                for y in 0..h {
                    let src = (p * ph + y + pad) * pw + pad;
                    d[(p * h + y) * w..(p * h + y + 1) * w].copy_from_slice(&g[src..src + w]);
                }
            }
            accumulate(nodes, grads, *input, d);
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Permute { input, perm } => {
            let map = permute_index(val(*input).shape(), perm);
            let mut d = vec![0.0; g.len()];
            for (o, &src) in map.iter().enumerate() {
                d[src] = g[o];
            }
            accumulate(nodes, grads, *input, d);
        }
        Op::Conv {
            input,
            weight,
            bias,
            geom,
        } => {
            let mut gx = needs(*input).then(|| vec![0.0; val(*input).numel()]);
            let mut gw = needs(*weight).then(|| vec![0.0; val(*weight).numel()]);
            let mut gb = bias
                .filter(|b| needs(*b))
                .map(|b| vec![0.0; val(b).numel()]);
            kernels::conv_backward(
                geom,
                val(*input).data(),
                val(*weight).data(),
                g,
                gx.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            if let Some(d) = gx {
                accumulate(nodes, grads, *input, d);
            }
            if let Some(d) = gw {
                accumulate(nodes, grads, *weight, d);
            }
            if let (Some(b), Some(d)) = (bias, gb) {
                accumulate(nodes, grads, *b, d);
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let (b, c, inner) = kernels::channel_layout(out.shape());
            let gam = val(*gamma).data();
            let m = (b * inner) as f64;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = vec![0.0; g.len()];
            for ch in 0..c {
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for bi in 0..b {
                    let r = (bi * c + ch) * inner..(bi * c + ch + 1) * inner;
                    for (gv, xh) in g[r.clone()].iter().zip(&xhat[r]) {
                        sum_g += gv;
                        sum_gx += gv * xh;
                    }
                }
                dgamma[ch] = sum_gx;
                dbeta[ch] = sum_g;
                let k = gam[ch] * inv_std[ch];
                for bi in 0..b {
                    let r = (bi * c + ch) * inner..(bi * c + ch + 1) * inner;
                    for i in r {
                        dx[i] = if *train {
                            k * (g[i] - sum_g / m - xhat[i] * sum_gx / m)
                        } else {
                            k * g[i]
                        };
                    }
                }
            }
            accumulate(nodes, grads, *input, dx);
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::BilinearSample { image, coords } => {
            let mut gi = needs(*image).then(|| vec![0.0; val(*image).numel()]);
            let mut gc = needs(*coords).then(|| vec![0.0; val(*coords).numel()]);
            kernels::bilinear_sample_backward(
                val(*image),
                val(*coords),
                g,
                gi.as_deref_mut(),
                gc.as_deref_mut(),
            );
            if let Some(d) = gi {
                accumulate(nodes, grads, *image, d);
            }
            if let Some(d) = gc {
                accumulate(nodes, grads, *coords, d);
            }
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

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.value(self.id).item()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if !std::ptr::eq(self.tape, other.tape) {
            bail!(Contract, "operands recorded on different tapes");
        }
        Ok(())
    }

    fn unary(&self, op: Op, what: &str, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let v = self.tape.value(self.id);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(v.shape(), data)?;
        drop(v);
        self.tape.push(t, op, self.tape.rg(self.id), what)
    }

    fn binary(
        &self,
        other: &Var<'t>,
        op: Op,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let a = self.tape.value(self.id);
        let b = self.tape.value(other.id);
        check_same_shape(a.shape(), b.shape(), what)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(a.shape(), data)?;
        drop((a, b));
        let rg = self.tape.rg(self.id) || self.tape.rg(other.id);
        self.tape.push(t, op, rg, what)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.id, s), "scale", |x| x * s)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'t>> {
        self.unary(Op::AddScalar(self.id), "add_scalar", |x| x + s)
    }

    pub fn abs(&self) -> Result<Var<'t>> {
        self.unary(Op::Abs(self.id), "abs", f64::abs)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary(Op::Square(self.id), "square", |x| x * x)
    }

    /// Elementwise power; the base should be non-negative for fractional exponents.
    pub fn powf(&self, p: f64) -> Result<Var<'t>> {
        self.unary(Op::Powf(self.id, p), "powf", |x| x.powf(p))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(Op::Relu(self.id), "relu", |x| x.max(0.0))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(Op::Sigmoid(self.id), "sigmoid", |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary(Op::Tanh(self.id), "tanh", f64::tanh)
    }

    /// Natural logarithm; non-positive inputs raise a numeric error.
    pub fn ln(&self) -> Result<Var<'t>> {
        self.unary(Op::Ln(self.id), "ln", f64::ln)
    }

    /// Softmax over axis 1 (channels).
    pub fn softmax_channels(&self) -> Result<Var<'t>> {
        let v = self.tape.value(self.id);
        if v.ndim() < 2 {
            bail!(
                Dimension,
                "softmax_channels needs at least 2 axes, got {:?}",
                v.shape()
            );
        }
        let t = Tensor::new(v.shape(), kernels::softmax_channels(&v))?;
        drop(v);
        self.tape.push(
            t,
            Op::SoftmaxChannels(self.id),
            self.tape.rg(self.id),
            "softmax",
        )
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s: f64 = self.tape.value(self.id).data().iter().sum();
        self.tape.push(
            Tensor::scalar(s),
            Op::Sum(self.id),
            self.tape.rg(self.id),
            "sum",
        )
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let v = self.tape.value(self.id);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        drop(v);
        self.tape.push(
            Tensor::scalar(m),
            Op::Mean(self.id),
            self.tape.rg(self.id),
            "mean",
        )
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let v = self.tape.value(self.id);
        if axis >= v.ndim() || v.ndim() < 2 {
            bail!(Dimension, "mean_axis({axis}) on shape {:?}", v.shape());
        }
        let (outer, dim, inner) = axis_split(v.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..dim {
                let src = &v.data()[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                data[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        data.iter_mut().for_each(|d| *d /= dim as f64);
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(&shape, data)?;
        drop(v);
        self.tape.push(
            t,
            Op::MeanAxis {
                input: self.id,
                axis,
            },
            self.tape.rg(self.id),
            "mean_axis",
        )
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            bail!(Dimension, "concat of zero tensors");
        };
        let tape = first.tape;
        let values: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| tape.value(p.id)).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            bail!(Dimension, "concat axis {axis} out of range for {base:?}");
        }
        let mut total = 0;
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                bail!(
                    Dimension,
                    "concat: shape {s:?} incompatible with {base:?} on axis {axis}"
                );
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let dim = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * dim * inner..(o + 1) * dim * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, data)?;
        drop(values);
        let rg = parts.iter().any(|p| tape.rg(p.id));
        tape.push(
            t,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.tape.value(self.id);
        if axis >= v.ndim() || len == 0 || start + len > v.shape()[axis] {
            bail!(
                Dimension,
                "slice axis {axis} [{start}, {}) out of range for {:?}",
                start + len,
                v.shape()
            );
        }
        let (outer, dim, inner) = axis_split(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * dim + start) * inner;
            data.extend_from_slice(&v.data()[s..s + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(&shape, data)?;
        drop(v);
        self.tape.push(
            t,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            self.tape.rg(self.id),
            "slice",
        )
    }

    /// Zero padding of the last two axes by `pad` on every side.
    pub fn pad(&self, pad: usize) -> Result<Var<'t>> {
        let v = self.tape.value(self.id);
        let s = v.shape();
        if s.len() < 2 {
            bail!(Dimension, "pad needs at least 2 axes, got {s:?}");
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes: usize = s[..s.len() - 2].iter().product();
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut data = vec![0.0; planes * ph * pw];
        for p in 0..planes {
            for y in 0..h {
                let dst = (p * ph + y + pad) * pw + pad;
                data[dst..dst + w].copy_from_slice(&v.data()[(p * h + y) * w..(p * h + y + 1) * w]);
            }
        }
        let mut shape = s.to_vec();
        let n = shape.len();
        shape[n - 2] = ph;
        shape[n - 1] = pw;
        let t = Tensor::new(&shape, data)?;
        drop(v);
        self.tape.push(
            t,
            Op::PadSpatial {
                input: self.id,
                pad,
            },
            self.tape.rg(self.id),
            "pad",
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let t = self.tape.value(self.id).clone().reshape(shape)?;
        self.tape
            .push(t, Op::Reshape(self.id), self.tape.rg(self.id), "reshape")
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let v = self.tape.value(self.id);
        let mut seen = vec![false; v.ndim()];
        if perm.len() != v.ndim()
            || perm
                .iter()
                .any(|&p| p >= v.ndim() || std::mem::replace(&mut seen[p], true))
        {
            bail!(
                Dimension,
                "invalid permutation {perm:?} for {:?}",
                v.shape()
            );
        }
        let map = permute_index(v.shape(), perm);
        let data = map.iter().map(|&i| v.data()[i]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| v.shape()[p]).collect();
        let t = Tensor::new(&shape, data)?;
        drop(v);
        self.tape.push(
            t,
            Op::Permute {
                input: self.id,
                perm: perm.to_vec(),
            },
            self.tape.rg(self.id),
            "permute",
        )
    }

    fn conv_nd(
        &self,
        weight: &Var<'t>,
        bias: Option<&Var<'t>>,
        geom: ConvGeometry,
        out_shape: &[usize],
        what: &str,
    ) -> Result<Var<'t>> {
        self.same_tape(weight)?;
        let x = self.tape.value(self.id);
        let w = self.tape.value(weight.id);
        let b = bias.map(|b| self.tape.value(b.id));
        if let Some(b) = &b {
            if b.numel() != geom.out_channels {
                bail!(
                    Dimension,
                    "{what}: bias has {} elements for {} output channels",
                    b.numel(),
                    geom.out_channels
                );
            }
        }
        let data = kernels::conv_forward(&geom, x.data(), w.data(), b.as_ref().map(|b| b.data()));
        let t = Tensor::new(out_shape, data)?;
        drop((x, w, b));
        let rg = self.tape.rg(self.id)
            || self.tape.rg(weight.id)
            || bias.is_some_and(|b| self.tape.rg(b.id));
        self.tape.push(
            t,
            Op::Conv {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            rg,
            what,
        )
    }

    /// 2D cross-correlation. Input `[B,C,H,W]`, weight `[O,C,kH,kW]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 {
            bail!(
                Dimension,
                "conv2d expects 4-d input and weight, got {xs:?} and {ws:?}"
            );
        }
        let geom = ConvGeometry::new(
            &[xs[0], xs[1], 1, xs[2], xs[3]],
            &[ws[0], ws[1], 1, ws[2], ws[3]],
            [1, stride, stride],
            [0, padding, padding],
        )?;
        let [b, o, _, h, w] = geom.output_shape();
        self.conv_nd(weight, bias, geom, &[b, o, h, w], "conv2d")
    }

    /// 3D cross-correlation. Input `[B,C,D,H,W]`, weight `[O,C,kD,kH,kW]`.
    pub fn conv3d(
        &self,
        weight: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let geom = ConvGeometry::new(&self.shape(), &weight.shape(), [stride; 3], [padding; 3])?;
        let out = geom.output_shape();
        self.conv_nd(weight, bias, geom, &out, "conv3d")
    }

    /// Batch normalization over every axis except 1.
    ///
    /// `running` of `None` selects train mode (batch statistics, returned for the
    /// caller to fold into its running averages); `Some` selects eval mode.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        running: Option<&BatchStats>,
        epsilon: f64,
    ) -> Result<(Var<'t>, Option<BatchStats>)> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let x = self.tape.value(self.id);
        if x.ndim() < 2 {
            bail!(
                Dimension,
                "batch_norm needs [B, C, ...], got {:?}",
                x.shape()
            );
        }
        let (b, c, inner) = kernels::channel_layout(x.shape());
        let gam = self.tape.value(gamma.id);
        let bet = self.tape.value(beta.id);
        if gam.numel() != c || bet.numel() != c {
            bail!(
                Dimension,
                "batch_norm: {c} channels but gamma/beta have {}/{} elements",
                gam.numel(),
                bet.numel()
            );
        }
        let (stats, train) = match running {
            None => {
                let (mean, var) = kernels::channel_moments(&x);
                (BatchStats { mean, var }, true)
            }
            Some(r) => {
                if r.mean.len() != c || r.var.len() != c {
                    bail!(
                        Dimension,
                        "batch_norm: running statistics sized for {} channels",
                        r.mean.len()
                    );
                }
                (r.clone(), false)
            }
        };
        let inv_std: Vec<f64> = stats
            .var
            .iter()
            .map(|v| 1.0 / (v + epsilon).sqrt())
            .collect();
        let mut xhat = vec![0.0; x.numel()];
        let mut out = vec![0.0; x.numel()];
        for bi in 0..b {
            for ch in 0..c {
                let r = (bi * c + ch) * inner..(bi * c + ch + 1) * inner;
                for i in r {
                    let xh = (x.data()[i] - stats.mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gam.data()[ch] * xh + bet.data()[ch];
                }
            }
        }
        let t = Tensor::new(x.shape(), out)?;
        drop((x, gam, bet));
        let rg = self.tape.rg(self.id) || self.tape.rg(gamma.id) || self.tape.rg(beta.id);
        let v = self.tape.push(
            t,
            Op::BatchNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                train,
            },
            rg,
            "batch_norm",
        )?;
        Ok((v, train.then_some(stats)))
    }

    /// Differentiable bilinear sampling of `self` (`[B,C,H,W]`) at pixel `coords` (`[B,2,H',W']`).
    pub fn bilinear_sample(&self, coords: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(coords)?;
        let t = kernels::bilinear_sample(&self.tape.value(self.id), &self.tape.value(coords.id))?;
        let rg = self.tape.rg(self.id) || self.tape.rg(coords.id);
        self.tape.push(
            t,
            Op::BilinearSample {
                image: self.id,
                coords: coords.id,
            },
            rg,
            "bilinear_sample",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel_passes_input() {
        let tape = Tape::new();
        let x = tape
            .constant(Tensor::from_fn(&[2, 1, 3, 4], |i| i as f64 * 0.3))
            .unwrap();
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let b = tape.constant(t(&[1], &[0.0])).unwrap();
        let y = x.conv2d(&w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn conv2d_constant_input_all_ones_kernel() {
        let tape = Tape::new();
        let c = 1.75;
        let x = tape.constant(Tensor::full(&[1, 1, 5, 6], c)).unwrap();
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 3, 4]);
        assert!(y.value().data().iter().all(|&v| v == 9.0 * c));
    }

    #[test]
    fn conv2d_two_by_two_sum() {
        let tape = Tape::new();
        let x = tape
            .constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.item(), 10.0);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
        assert!(matches!(
            x.conv2d(&w, None, 1, 1),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn conv3d_shapes_and_interior_sum() {
        let tape = Tape::new();
        let c = -0.5;
        let x = tape.constant(Tensor::full(&[1, 1, 4, 5, 5], c)).unwrap();
        let ones = tape.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0)).unwrap();
        let y = x.conv3d(&ones, None, 1, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 4, 5, 5]);
        // interior voxel (d=1..2, h/w=1..3) sees all 27 taps
        let v = y.value();
        assert_eq!(v.data()[(5 + 2) * 5 + 2], 27.0 * c);
        let id = tape.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(
            x.conv3d(&id, None, 1, 0).unwrap().value().data(),
            x.value().data()
        );
    }

    #[test]
    fn activations() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(x.sigmoid().unwrap().value().data()[1], 0.5);
        assert_eq!(x.tanh().unwrap().value().data()[1], 0.0);
    }

    #[test]
    fn reductions_and_concat() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[4, 2])).unwrap();
        assert_eq!(z.sum().unwrap().item(), 0.0);
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(x.mean().unwrap().item(), 2.0);
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 5])).unwrap();
        assert_eq!(Var::concat(&[a, b], 1).unwrap().shape(), vec![2, 8]);
        assert!(Var::concat(&[a, b], 0).is_err());
    }

    #[test]
    fn slice_pad_permute_values() {
        let tape = Tape::new();
        let x = tape
            .constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64))
            .unwrap();
        let s = x.slice(1, 1, 2).unwrap();
        assert_eq!(
            s.value().data(),
            &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]
        );
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![2, 2, 3]);
        assert_eq!(p.value().data()[..3], [0.0, 2.0, 4.0]);
        let img = tape.constant(t(&[1, 1, 1, 1], &[7.0])).unwrap();
        let padded = img.pad(1).unwrap();
        assert_eq!(padded.shape(), vec![1, 1, 3, 3]);
        assert_eq!(padded.value().data()[4], 7.0);
        assert_eq!(padded.value().data().iter().sum::<f64>(), 7.0);
    }

    #[test]
    fn backward_analytic_gradients() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        tape.backward(x.square().unwrap().sum().unwrap()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, -4.0, 1.0]);

        let tape = Tape::new();
        let a = tape.param(t(&[2], &[3.0, 4.0])).unwrap();
        let b = tape.param(t(&[2], &[-1.0, 5.0])).unwrap();
        tape.backward(a.mul(&b).unwrap().sum().unwrap()).unwrap();
        assert_eq!(a.grad().unwrap().data(), &[-1.0, 5.0]);
        assert_eq!(b.grad().unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_twice_doubles_and_zero_grad_resets() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.5, -0.5])).unwrap();
        let loss = x.square().unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        let once = x.grad().unwrap();
        tape.backward(loss).unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        tape.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn non_finite_leaf_is_rejected() {
        let tape = Tape::new();
        let bad = t(&[2], &[1.0, f64::INFINITY]);
        assert!(matches!(tape.leaf(bad), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn batch_norm_constant_channel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1, 3, 3], 5.0)).unwrap();
        let g = tape.constant(t(&[1], &[1.0])).unwrap();
        let b = tape.constant(t(&[1], &[2.0])).unwrap();
        let (y, stats) = x.batch_norm(&g, &b, None, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![5.0]);
        assert_eq!(stats.var, vec![0.0]);
    }

    #[test]
    fn batch_norm_zero_gamma_gives_beta() {
        let tape = Tape::new();
        let x = tape
            .constant(Tensor::from_fn(&[3, 2, 2], |i| (i as f64).sin()))
            .unwrap();
        let g = tape.constant(Tensor::zeros(&[2])).unwrap();
        let b = tape.constant(t(&[2], &[0.25, -1.0])).unwrap();
        let (y, _) = x.batch_norm(&g, &b, None, 1e-5).unwrap();
        let v = y.value();
        for bi in 0..3 {
            assert!(v.data()[bi * 4..bi * 4 + 2].iter().all(|&x| x == 0.25));
            assert!(v.data()[bi * 4 + 2..bi * 4 + 4].iter().all(|&x| x == -1.0));
        }
    }

    #[test]
    fn batch_norm_standardized_input_is_nearly_unchanged() {
        let tape = Tape::new();
        // per-channel mean 0, biased variance 1
        let x = tape.constant(t(&[4, 1], &[1.0, -1.0, 1.0, -1.0])).unwrap();
        let g = tape.constant(t(&[1], &[1.0])).unwrap();
        let b = tape.constant(t(&[1], &[0.0])).unwrap();
        let (y, _) = x.batch_norm(&g, &b, None, 1e-5).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (o, i) in y.value().data().iter().zip(x.value().data()) {
            assert!((o - i * scale).abs() < 1e-15);
            assert!((o - i).abs() < 1e-5);
        }
    }
}
