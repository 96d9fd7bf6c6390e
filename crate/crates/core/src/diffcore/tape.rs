use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tensor::{broadcast_strides, for_each_broadcast, gemm, reduce_to_shape, Tensor};
use super::DiffError;

/// A fused operation whose backward pass is supplied by the caller.
///
/// Used for kernels (splatting, Chamfer) whose primitive expansion would be
/// prohibitively large.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: one optional gradient per input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor)
        -> Vec<Option<Tensor>>;
}

pub(crate) enum Op {
    Leaf { requires_grad: bool },
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar,
    MulScalar(f64),
    MatMul,
    Conv2d { stride: usize, pad: usize },
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Pow(f64),
    Sin,
    Cos,
    Abs,
    Clamp { lo: f64, hi: f64 },
    Sum,
    Mean,
    SumAxis { axis: usize },
    MinLast { argmin: Vec<usize> },
    Concat { axis: usize },
    Reshape,
    BroadcastTo,
    Narrow { axis: usize, start: usize },
    IndexSelect { indices: Vec<usize> },
    Transpose,
    Custom(Rc<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::AddScalar => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Pow(_) => "pow",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Abs => "abs",
            Op::Clamp { .. } => "clamp",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MinLast { .. } => "min",
            Op::Concat { .. } => "concat",
            Op::Reshape => "reshape",
            Op::BroadcastTo => "broadcast_to",
            Op::Narrow { .. } => "narrow",
            Op::IndexSelect { .. } => "index_select",
            Op::Transpose => "transpose",
            Op::Custom(c) => c.name(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    op: Op,
}

/// Define-by-run record of every operation evaluated since the last clear.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of one backward pass, indexed by variable.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when it was unreachable.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
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

    /// Drops every recorded node. Requires exclusive access, so no `Var` can outlive it.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, op: Op) -> Var<'_> {
        self.push_rc(Rc::new(value), parents, op)
    }

    fn push_rc(&self, value: Rc<Tensor>, parents: Vec<usize>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A trainable input.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), Op::Leaf { requires_grad: true })
    }

    /// A trainable input sharing storage with the caller.
    pub fn var_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        self.push_rc(value, Vec::new(), Op::Leaf { requires_grad: true })
    }

    /// An input that never receives a gradient from [`Tape::backward`].
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), Op::Leaf { requires_grad: false })
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Registers the output of a fused operation.
    pub fn custom<'t>(&'t self, op: Rc<dyn CustomOp>, inputs: &[Var<'t>], output: Tensor) -> Var<'t> {
        self.push(output, inputs.iter().map(|v| v.id).collect(), Op::Custom(op))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(DiffError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, parts.iter().map(|p| p.id).collect(), Op::Concat { axis }))
    }

    /// Stacks scalars (or single-element tensors) into a vector.
    pub fn stack_scalars<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>, DiffError> {
        let flat = parts
            .iter()
            .map(|p| p.reshape(&[1]))
            .collect::<Result<Vec<_>, _>>()?;
        self.concat(&flat, 0)
    }

    /// Full reverse sweep from `root` to every trainable leaf.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, DiffError> {
        let nodes = self.nodes.borrow();
        let targets: Vec<bool> = nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf { requires_grad: true }))
            .collect();
        drop(nodes);
        self.sweep(root, targets)
    }

    /// Reverse sweep restricted to paths that end at `leaves`; other branches are skipped.
    pub fn backward_wrt(&self, root: Var<'_>, leaves: &[Var<'_>]) -> Result<Gradients, DiffError> {
        let mut targets = vec![false; self.len()];
        for l in leaves {
            targets[l.id] = true;
        }
        self.sweep(root, targets)
    }

    fn sweep(&self, root: Var<'_>, targets: Vec<bool>) -> Result<Gradients, DiffError> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape().to_vec();
        if nodes[root.id].value.len() != 1 {
            return Err(DiffError::NonScalarRoot(root_shape));
        }
        // A node matters only if some target leaf feeds into it.
        let mut relevant = targets.clone();
        for (i, n) in nodes.iter().enumerate().take(root.id + 1) {
            if !relevant[i] && n.parents.iter().any(|&p| relevant[p]) {
                relevant[i] = true;
            }
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !relevant[root.id] {
            return Ok(Gradients { grads });
        }
        grads[root.id] = Some(Tensor::full(&root_shape, 1.0));
        for i in (0..=root.id).rev() {
            if !relevant[i] {
                continue;
            }
            let node = &nodes[i];
            if node.parents.is_empty() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let wanted: Vec<bool> = node.parents.iter().map(|&p| relevant[p]).collect();
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let pgrads = backward_node(&node.op, &parent_vals, &node.value, &g, &wanted);
            for ((&p, pg), want) in node.parents.iter().zip(pgrads).zip(wanted) {
                if !want {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        // Only leaves that were asked for keep their gradients.
        for (i, g) in grads.iter_mut().enumerate() {
            if !targets[i] {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn unary(x: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = x.data().iter().zip(g.data()).map(|(&x, &g)| f(x, g)).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

fn binary_grad(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    f: impl Fn(f64, f64, f64) -> (f64, f64),
) -> (Tensor, Tensor) {
    let out_shape = g.shape();
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    {
        let (ad, bd, gd) = (a.data(), b.data(), g.data());
        let gam = ga.data_mut();
        let gbm = gb.data_mut();
        for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
            let (da, db) = f(ad[ia], bd[ib], gd[o]);
            gam[ia] += da;
            gbm[ib] += db;
        });
    }
    (ga, gb)
}

fn backward_node(
    op: &Op,
    inputs: &[&Tensor],
    out: &Tensor,
    g: &Tensor,
    wanted: &[bool],
) -> Vec<Option<Tensor>> {
    match op {
        Op::Leaf { .. } => Vec::new(),
        Op::Add => vec![
            Some(reduce_to_shape(g, inputs[0].shape())),
            Some(reduce_to_shape(g, inputs[1].shape())),
        ],
        Op::Sub => vec![
            Some(reduce_to_shape(g, inputs[0].shape())),
            Some(reduce_to_shape(g, inputs[1].shape()).map(|x| -x)),
        ],
        Op::Mul => {
            let (ga, gb) = binary_grad(inputs[0], inputs[1], g, |a, b, g| (g * b, g * a));
            vec![Some(ga), Some(gb)]
        }
        Op::Div => {
            let (ga, gb) =
                binary_grad(inputs[0], inputs[1], g, |a, b, g| (g / b, -g * a / (b * b)));
            vec![Some(ga), Some(gb)]
        }
        Op::Neg => vec![Some(g.map(|x| -x))],
        Op::AddScalar => vec![Some(g.clone())],
        Op::MulScalar(c) => vec![Some(g.map(|x| x * c))],
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = wanted[0].then(|| {
                let mut ga = Tensor::zeros(a.shape());
                gemm(m, n, k, g.data(), false, b.data(), true, ga.data_mut(), false);
                ga
            });
            let gb = wanted[1].then(|| {
                let mut gb = Tensor::zeros(b.shape());
                gemm(k, m, n, a.data(), true, g.data(), false, gb.data_mut(), false);
                gb
            });
            vec![ga, gb]
        }
        Op::Conv2d { stride, pad } => {
            let (gx, gw, gb) = super::conv::conv2d_backward(
                inputs[0], inputs[1], g, *stride, *pad, wanted[0], wanted[1],
            );
            let gb = wanted[2].then_some(gb);
            vec![gx, gw, gb]
        }
        Op::Relu => vec![Some(unary(inputs[0], g, |x, g| if x > 0.0 { g } else { 0.0 }))],
        Op::LeakyRelu(s) => vec![Some(unary(inputs[0], g, |x, g| if x > 0.0 { g } else { g * s }))],
        Op::Sigmoid => vec![Some(unary(out, g, |y, g| g * y * (1.0 - y)))],
        Op::Tanh => vec![Some(unary(out, g, |y, g| g * (1.0 - y * y)))],
        Op::Exp => vec![Some(unary(out, g, |y, g| g * y))],
        Op::Log => vec![Some(unary(inputs[0], g, |x, g| g / x))],
        Op::Pow(p) => vec![Some(unary(inputs[0], g, |x, g| g * p * x.powf(p - 1.0)))],
        Op::Sin => vec![Some(unary(inputs[0], g, |x, g| g * x.cos()))],
        Op::Cos => vec![Some(unary(inputs[0], g, |x, g| -g * x.sin()))],
        Op::Abs => vec![Some(unary(inputs[0], g, |x, g| {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        }))],
        Op::Clamp { lo, hi } => vec![Some(unary(inputs[0], g, |x, g| {
            if x >= *lo && x <= *hi {
                g
            } else {
                0.0
            }
        }))],
        Op::Sum => vec![Some(Tensor::full(inputs[0].shape(), g.item()))],
        Op::Mean => {
            let n = inputs[0].len().max(1) as f64;
            vec![Some(Tensor::full(inputs[0].shape(), g.item() / n))]
        }
        Op::SumAxis { axis } => {
            let shape = inputs[0].shape();
            let outer: usize = shape[..*axis].iter().product();
            let len = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut gx = Tensor::zeros(shape);
            let gd = g.data();
            let gx_d = gx.data_mut();
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * len + a) * inner;
                    gx_d[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }
        Op::MinLast { argmin } => {
            let shape = inputs[0].shape();
            let last = *shape.last().unwrap();
            let mut gx = Tensor::zeros(shape);
            let gx_d = gx.data_mut();
            for (r, (&j, &gv)) in argmin.iter().zip(g.data()).enumerate() {
                gx_d[r * last + j] += gv;
            }
            vec![Some(gx)]
        }
        Op::Concat { axis } => {
            let out_shape = g.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis] * inner;
            let mut offset = 0;
            inputs
                .iter()
                .zip(wanted)
                .map(|(x, &w)| {
                    let chunk = x.shape()[*axis] * inner;
                    let res = w.then(|| {
                        let mut data = Vec::with_capacity(x.len());
                        for o in 0..outer {
                            let start = o * total + offset;
                            data.extend_from_slice(&g.data()[start..start + chunk]);
                        }
                        Tensor::new(x.shape(), data).expect("concat chunk")
                    });
                    offset += chunk;
                    res
                })
                .collect()
        }
        Op::Reshape => vec![Some(g.clone().reshaped(inputs[0].shape()).expect("reshape grad"))],
        Op::BroadcastTo => vec![Some(reduce_to_shape(g, inputs[0].shape()))],
        Op::Narrow { axis, start } => {
            let shape = inputs[0].shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let len = g.shape()[*axis];
            let mut gx = Tensor::zeros(shape);
            let gx_d = gx.data_mut();
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * shape[*axis] + start) * inner;
                gx_d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![Some(gx)]
        }
        Op::IndexSelect { indices } => {
            let shape = inputs[0].shape();
            let row: usize = shape[1..].iter().product();
            let mut gx = Tensor::zeros(shape);
            let gx_d = gx.data_mut();
            for (k, &i) in indices.iter().enumerate() {
                for c in 0..row {
                    gx_d[i * row + c] += g.data()[k * row + c];
                }
            }
            vec![Some(gx)]
        }
        Op::Transpose => {
            let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            vec![Some(transpose2(g, c, r))]
        }
        Op::Custom(custom) => custom.backward(inputs, out, g),
    }
}

fn transpose2(x: &Tensor, rows: usize, cols: usize) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            data[c * rows + r] = x.data()[r * cols + c];
        }
    }
    Tensor::new(&[cols, rows], data).expect("transpose")
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn op_name(&self) -> &'static str {
        self.tape.nodes.borrow()[self.id].op.name()
    }

    /// A constant copy of this value, cut off from the gradient flow.
    pub fn detach(&self) -> Var<'t> {
        let value = self.value();
        self.tape
            .push_rc(value, Vec::new(), Op::Leaf { requires_grad: false })
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.value().map(f);
        self.tape.push(out, vec![self.id], op)
    }

    fn binary(&self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>, DiffError> {
        let (a, b) = (self.value(), other.value());
        let name = op.name();
        let out = if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape(), data)?
        } else {
            let out_shape = super::tensor::broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| {
                DiffError::ShapeMismatch {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                }
            })?;
            let sa = broadcast_strides(a.shape(), &out_shape);
            let sb = broadcast_strides(b.shape(), &out_shape);
            let mut data = vec![0.0; out_shape.iter().product()];
            let (ad, bd) = (a.data(), b.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
            Tensor::new(&out_shape, data)?
        };
        Ok(self.tape.push(out, vec![self.id, other.id], op))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    /// Elementwise division; a zero divisor is rejected.
    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        if let Some(&z) = other.value().data().iter().find(|&&x| x == 0.0) {
            return Err(DiffError::Domain { op: "div", value: z });
        }
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar, |x| x + c)
    }

    pub fn mul_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::MulScalar(c), |x| x * c)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.unary(Op::LeakyRelu(slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp, f64::exp)
    }

    /// Natural log; non-positive operands are rejected.
    pub fn log(&self) -> Result<Var<'t>, DiffError> {
        if let Some(&bad) = self.value().data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(DiffError::Domain { op: "log", value: bad });
        }
        Ok(self.unary(Op::Log, f64::ln))
    }

    /// `x^p`; a fractional exponent needs non-negative operands.
    pub fn pow(&self, p: f64) -> Result<Var<'t>, DiffError> {
        if p.fract() != 0.0 {
            if let Some(&bad) = self.value().data().iter().find(|&&x| x < 0.0) {
                return Err(DiffError::Domain { op: "pow", value: bad });
            }
        }
        Ok(self.unary(Op::Pow(p), |x| x.powf(p)))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Pow(2.0), |x| x * x)
    }

    pub fn sin(&self) -> Var<'t> {
        self.unary(Op::Sin, f64::sin)
    }

    pub fn cos(&self) -> Var<'t> {
        self.unary(Op::Cos, f64::cos)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs, f64::abs)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp { lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), vec![self.id], Op::Sum)
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let m = v.sum() / v.len().max(1) as f64;
        self.tape.push(Tensor::scalar(m), vec![self.id], Op::Mean)
    }

    /// Sums out one axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>, DiffError> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(DiffError::Invalid {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] += v.data()[base + i];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.tape.push(out, vec![self.id], Op::SumAxis { axis }))
    }

    /// Minimum over the last axis, returning the (lowest-index) argmin per row.
    pub fn min_last(&self) -> Result<(Var<'t>, Vec<usize>), DiffError> {
        let v = self.value();
        let shape = v.shape();
        let last = match shape.last() {
            Some(&l) if l > 0 => l,
            _ => {
                return Err(DiffError::Invalid {
                    op: "min",
                    msg: format!("cannot reduce shape {shape:?}"),
                })
            }
        };
        let rows = v.len() / last;
        let mut argmin = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v.data()[r * last..(r + 1) * last];
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x < row[best] {
                    best = j;
                }
            }
            argmin.push(best);
            data.push(row[best]);
        }
        let out = Tensor::new(&shape[..shape.len() - 1], data)?;
        let var = self
            .tape
            .push(out, vec![self.id], Op::MinLast { argmin: argmin.clone() });
        Ok((var, argmin))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>, DiffError> {
        let out = (*self.value()).clone().reshaped(shape)?;
        Ok(self.tape.push(out, vec![self.id], Op::Reshape))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>, DiffError> {
        let v = self.value();
        match super::tensor::broadcast_shapes(v.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: v.shape().to_vec(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let st = broadcast_strides(v.shape(), shape);
        let zeros = vec![0; shape.len()];
        let mut data = vec![0.0; shape.iter().product()];
        for_each_broadcast(shape, &st, &zeros, |o, i, _| data[o] = v.data()[i]);
        let out = Tensor::new(shape, data)?;
        Ok(self.tape.push(out, vec![self.id], Op::BroadcastTo))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>, DiffError> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(DiffError::Invalid {
                op: "narrow",
                msg: format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.tape.push(out, vec![self.id], Op::Narrow { axis, start }))
    }

    /// Gathers rows (entries of axis 0) by index; repeats allowed.
    pub fn index_select(&self, indices: &[usize]) -> Result<Var<'t>, DiffError> {
        let v = self.value();
        let shape = v.shape();
        if shape.is_empty() {
            return Err(DiffError::Invalid {
                op: "index_select",
                msg: "scalar input".into(),
            });
        }
        let row: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= shape[0] {
                return Err(DiffError::Invalid {
                    op: "index_select",
                    msg: format!("index {i} out of range for {shape:?}"),
                });
            }
            data.extend_from_slice(&v.data()[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = indices.len();
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.tape.push(
            out,
            vec![self.id],
            Op::IndexSelect {
                indices: indices.to_vec(),
            },
        ))
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Result<Var<'t>, DiffError> {
        let v = self.value();
        if v.ndim() != 2 {
            return Err(DiffError::Invalid {
                op: "transpose",
                msg: format!("expected a matrix, got {:?}", v.shape()),
            });
        }
        let out = transpose2(&v, v.shape()[0], v.shape()[1]);
        Ok(self.tape.push(out, vec![self.id], Op::Transpose))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, a.data(), false, b.data(), false, out.data_mut(), false);
        Ok(self.tape.push(out, vec![self.id, other.id], Op::MatMul))
    }

    /// 2D convolution of `[B, C, H, W]` with weights `[O, C, kh, kw]` and bias `[O]`.
    pub fn conv2d(
        &self,
        weight: Var<'t>,
        bias: Var<'t>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>, DiffError> {
        let out = super::conv::conv2d_forward(&self.value(), &weight.value(), &bias.value(), stride, pad)?;
        Ok(self
            .tape
            .push(out, vec![self.id, weight.id, bias.id], Op::Conv2d { stride, pad }))
    }
}
