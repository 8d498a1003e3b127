//! Append-only reverse-mode tape.
//!
//! Each recorded node keeps its forward value; backward walks the nodes in
//! reverse insertion order, which is a valid topological order because a node
//! can only reference nodes recorded before it.

use std::collections::HashMap;

use super::kernels::{self, ConvGeometry, Pointwise};
use super::{arg_err, real, shape_err, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    Pointwise { x: Var, f: Pointwise },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    BroadcastTo(Var),
    SumAxes(Var),
    Softmax { x: Var, axis: usize, temperature: Option<Tensor<T>>, active: Option<usize> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, eps: f64 },
    Bilinear(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-shot recording of a forward computation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the trainable leaves.
#[derive(Debug)]
pub struct Gradients<T> {
    by_leaf: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.by_leaf.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.by_leaf.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "tape" });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf: receives a gradient from [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        value.ensure_finite("param")?;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant leaf: no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        value.ensure_finite("constant")?;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Copy of `x` that stops gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        self.value(x).ensure_finite("conv2d")?;
        let y = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(y, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    pub fn map(&mut self, x: Var, f: Pointwise) -> Result<Var> {
        let y = kernels::pointwise(self.value(x), f)?;
        self.push(y, Op::Pointwise { x, f }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Pointwise::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Pointwise::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Pointwise::Relu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map(x, Pointwise::Softplus)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(x, Pointwise::Clamp { lo, hi })
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.map(x, Pointwise::Affine { scale, shift })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("operands share a shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add")?;
        let y = self.zip(a, b, |x, y| x + y);
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub")?;
        let y = self.zip(a, b, |x, y| x - y);
        self.push(y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul")?;
        let y = self.zip(a, b, |x, y| x * y);
        self.push(y, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div")?;
        let y = self.zip(a, b, |x, y| x / y);
        if !y.is_finite() {
            return Err(TensorError::NonFinite { op: "div" });
        }
        self.push(y, Op::Div(a, b), &[a, b])
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let y = kernels::broadcast_to(self.value(x), shape)?;
        self.push(y, Op::BroadcastTo(x), &[x])
    }

    /// Broadcasts `b` to the shape of `a` and multiplies.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast_to(b, &shape)?;
        self.mul(a, bb)
    }

    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast_to(b, &shape)?;
        self.add(a, bb)
    }

    pub fn sub_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast_to(b, &shape)?;
        self.sub(a, bb)
    }

    pub fn div_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast_to(b, &shape)?;
        self.div(a, bb)
    }

    /// Sum over `axes`, keeping reduced axes with extent 1.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = kernels::sum_axes(self.value(x), axes)?;
        self.push(y, Op::SumAxes(x), &[x])
    }

    /// Arithmetic mean over `axes`, keeping reduced axes with extent 1.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.sum_axes(x, axes)?;
        let count: usize = axes.iter().map(|&a| self.shape(x)[a]).product();
        self.scale(s, 1.0 / count as f64)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.sum_axes(x, &axes)?;
        self.reshape(s, &[1])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax along `axis` with an optional constant per-position temperature
    /// (shape of `x` with extent 1 on `axis`, or a single value) and an optional
    /// count of active entries; inactive entries are exactly zero.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: Option<Tensor<T>>, active: Option<usize>) -> Result<Var> {
        let y = kernels::softmax_axis(self.value(x), axis, temperature.as_ref(), active)?;
        self.push(y, Op::Softmax { x, axis, temperature, active }, &[x])
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let y = kernels::group_norm(self.value(x), groups, self.value(gamma), self.value(beta), eps)?;
        self.push(y, Op::GroupNorm { x, gamma, beta, groups, eps }, &[x, gamma, beta])
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = kernels::bilinear_resize(self.value(x), out_h, out_w)?;
        self.push(y, Op::Bilinear(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = kernels::concat(&values, axis)?;
        self.push(y, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = kernels::slice_axis(self.value(x), axis, start, len)?;
        self.push(y, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let y = self.value(x).clone().reshape(shape)?;
        self.push(y, Op::Reshape(x), &[x])
    }

    /// Reverse pass from a one-element `loss`. The tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(arg_err("backward", "loss is not recorded on this tape"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        let mut by_leaf = HashMap::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                by_leaf.insert(Var(id), g);
                continue;
            }
            for (input, gi) in self.input_grads(id, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                by_leaf.entry(Var(id)).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { by_leaf })
    }

    fn input_grads(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[id];
        let y = &node.value;
        let elementwise = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
            let data = a.data().iter().zip(g.data()).map(|(&x, &gv)| f(x, gv)).collect();
            Tensor::new(a.shape().to_vec(), data).expect("gradient matches operand shape")
        };
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward(self.value(*x), self.value(*w), g, *geom)?;
                let mut out = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    out.push((*b, gb));
                }
                out
            }
            Op::Pointwise { x, f } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * f.derivative(xi, yi))
                    .collect();
                vec![(*x, Tensor::new(xv.shape().to_vec(), data)?)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let ga = elementwise(self.value(*b), &|bv, gv| bv * gv);
                let gb = elementwise(self.value(*a), &|av, gv| av * gv);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                let ga = elementwise(bv, &|bv, gv| gv / bv);
                let data = y.data().iter().zip(bv.data()).zip(g.data()).map(|((&q, &d), &gv)| -gv * q / d).collect();
                vec![(*a, ga), (*b, Tensor::new(bv.shape().to_vec(), data)?)]
            }
            Op::BroadcastTo(x) => vec![(*x, kernels::reduce_to(g, self.shape(*x))?)],
            Op::SumAxes(x) => vec![(*x, kernels::broadcast_to(g, self.shape(*x))?)],
            Op::Softmax { x, axis, temperature, active } => {
                vec![(*x, kernels::softmax_axis_backward(y, g, *axis, temperature.as_ref(), *active))]
            }
            Op::GroupNorm { x, gamma, beta, groups, eps } => {
                let (gx, gg, gb) = kernels::group_norm_backward(
                    self.value(*x),
                    *groups,
                    self.value(*gamma),
                    self.value(*beta),
                    *eps,
                    g,
                )?;
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Bilinear(x) => vec![(*x, kernels::bilinear_resize_backward(self.shape(*x), g))],
            Op::Concat { parts, axis } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    out.push((p, kernels::slice_axis(g, *axis, start, len)?));
                    start += len;
                }
                out
            }
            Op::Slice { x, axis, start } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                kernels::slice_axis_accumulate(&mut gx, g, *axis, *start);
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(self.shape(*x))?)],
        })
    }
}

/// Scalar helpers that keep intermediate constants on the tape.
impl<T: Real> Tape<T> {
    pub fn constant_like(&mut self, like: Var, value: f64) -> Result<Var> {
        let shape = self.shape(like).to_vec();
        self.constant(Tensor::full(&shape, real(value)))
    }
}
