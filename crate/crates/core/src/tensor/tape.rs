use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels;
use super::{sigmoid, Tensor};
use crate::error::{shape_err, Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;
/// Rows with a smaller L2 norm cannot be normalized.
const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: f64 },
    MeanAxis { x: usize, axis: usize },
    SumAll(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    Conv2d { x: usize, kernel: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Pick { x: usize, indices: Vec<usize> },
    ClampMax { x: usize, max: f64 },
    NormalizeRows { x: usize, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward pass. Node inputs always precede the
/// node itself, so reverse insertion order is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar root with respect to trainable leaves.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of a trainable leaf, or `None` for frozen or unreached leaves.
    pub fn get(&self, v: &Var<'_>) -> Option<&Tensor> {
        self.by_node.get(&v.id)
    }

    /// Gradient of `v`, reading an unreached leaf as all zeros.
    pub fn wrt(&self, v: &Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable leaf.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t.clone(), true)
    }

    /// Registers a frozen leaf; it never receives a gradient.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t.clone(), false)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        self.insert(Rc::new(t), Op::Leaf, requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn insert(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, ctx: &'static str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(ctx));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs(&op).iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.insert(Rc::new(value), op, requires_grad))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Concatenates along `axis`; every part must live on this tape.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| self.value(p.id)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = kernels::concat(&refs, axis)?;
        self.push(
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            "concat",
        )
    }

    /// Reverse accumulation from a single-element root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::ones(root_value.shape()));
        let mut out = Gradients::default();

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                out.by_node.insert(id, g);
                continue;
            }
            for (input, gi) in input_grads(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.axpy(1.0, &gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(out)
    }
}

fn inputs(op: &Op) -> Vec<usize> {
    use Op::*;
    match op {
        Leaf => vec![],
        MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
        Conv2d { x, kernel } => vec![*x, *kernel],
        Concat { parts, .. } => parts.clone(),
        Transpose(x) | Reshape(x) | SumAll(x) | Sigmoid(x) | Tanh(x) | Relu(x) | Gelu(x)
        | Exp(x) => vec![*x],
        Affine { x, .. }
        | MeanAxis { x, .. }
        | Softmax { x, .. }
        | LogSoftmax { x, .. }
        | Slice { x, .. }
        | Pick { x, .. }
        | ClampMax { x, .. }
        | NormalizeRows { x, .. } => vec![*x],
    }
}

fn elementwise(g: &Tensor, y: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::raw(
        g.shape().to_vec(),
        g.data().iter().zip(y.data()).map(|(&a, &b)| f(a, b)).collect(),
    )
}

/// Vector-Jacobian products of one node: `(input id, gradient)` pairs.
fn input_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| nodes[i].value.as_ref();
    let y = node.value.as_ref();
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let mut out = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                out.push((*a, kernels::matmul_grad_a(g, av, bv)));
            }
            if nodes[*b].requires_grad {
                out.push((*b, kernels::matmul_grad_b(g, av, bv)));
            }
            out
        }
        Op::Transpose(x) => vec![(*x, kernels::transpose(g).expect("rank checked"))],
        Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape()).expect("same numel"))],
        Op::Add(a, b) => vec![
            (*a, kernels::sum_to_shape(g, val(*a).shape())),
            (*b, kernels::sum_to_shape(g, val(*b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, kernels::sum_to_shape(g, val(*a).shape())),
            (*b, kernels::sum_to_shape(g, val(*b).shape()).map(|v| -v)),
        ],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let mut out = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                let gb = kernels::zip_broadcast("mul", g, bv, |x, y| x * y).expect("checked");
                out.push((*a, kernels::sum_to_shape(&gb, av.shape())));
            }
            if nodes[*b].requires_grad {
                let ga = kernels::zip_broadcast("mul", g, av, |x, y| x * y).expect("checked");
                out.push((*b, kernels::sum_to_shape(&ga, bv.shape())));
            }
            out
        }
        Op::Affine { x, scale } => vec![(*x, g.map(|v| v * scale))],
        Op::MeanAxis { x, axis } => {
            vec![(*x, kernels::expand_mean_grad(g, val(*x).shape(), *axis))]
        }
        Op::SumAll(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
        Op::Sigmoid(x) => vec![(*x, elementwise(g, y, |g, s| g * s * (1.0 - s)))],
        Op::Tanh(x) => vec![(*x, elementwise(g, y, |g, t| g * (1.0 - t * t)))],
        Op::Relu(x) => vec![(
            *x,
            elementwise(g, val(*x), |g, v| if v > 0.0 { g } else { 0.0 }),
        )],
        Op::Gelu(x) => vec![(*x, elementwise(g, val(*x), |g, v| g * gelu_grad(v)))],
        Op::Exp(x) => vec![(*x, elementwise(g, y, |g, e| g * e))],
        Op::Softmax { x, axis } => {
            let dot = kernels::dot_along(g, y, *axis);
            let centered = kernels::zip_broadcast("softmax", g, &dot, |a, b| a - b).expect("ok");
            vec![(*x, elementwise(&centered, y, |c, s| c * s))]
        }
        Op::LogSoftmax { x, axis } => {
            let probs = y.map(f64::exp);
            let ones = Tensor::ones(g.shape());
            let total = kernels::dot_along(g, &ones, *axis);
            let scaled = kernels::zip_broadcast("log_softmax", &probs, &total, |p, s| p * s)
                .expect("ok");
            vec![(*x, elementwise(g, &scaled, |a, b| a - b))]
        }
        Op::Conv2d { x, kernel } => {
            let (gx, gk) = kernels::conv2d_backward(
                val(*x),
                val(*kernel),
                g,
                nodes[*x].requires_grad,
                nodes[*kernel].requires_grad,
            );
            gx.map(|t| (*x, t)).into_iter().chain(gk.map(|t| (*kernel, t))).collect()
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            parts
                .iter()
                .map(|&p| {
                    let len = val(p).shape()[*axis];
                    let gp = kernels::slice(g, *axis, start, len).expect("ok");
                    start += len;
                    (p, gp)
                })
                .collect()
        }
        Op::Slice { x, axis, start } => {
            vec![(*x, kernels::unslice(g, val(*x).shape(), *axis, *start))]
        }
        Op::Pick { x, indices } => {
            let xv = val(*x);
            let k = *xv.shape().last().expect("rank >= 1");
            let mut data = vec![0.0; xv.len()];
            for (row, (&ix, &gv)) in indices.iter().zip(g.data()).enumerate() {
                data[row * k + ix] = gv;
            }
            vec![(*x, Tensor::raw(xv.shape().to_vec(), data))]
        }
        Op::ClampMax { x, max } => vec![(
            *x,
            elementwise(g, val(*x), |g, v| if v < *max { g } else { 0.0 }),
        )],
        Op::NormalizeRows { x, norms } => {
            let k = *y.shape().last().expect("rank >= 1");
            let mut data = vec![0.0; y.len()];
            for (r, &norm) in norms.iter().enumerate() {
                let gr = &g.data()[r * k..(r + 1) * k];
                let yr = &y.data()[r * k..(r + 1) * k];
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..k {
                    data[r * k + j] = (gr[j] - yr[j] * dot) / norm;
                }
            }
            vec![(*x, Tensor::raw(y.shape().to_vec(), data))]
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables from different tapes"
        );
    }

    fn unary(&self, op: Op, ctx: &'static str, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Self> {
        let out = f(&self.value())?;
        self.tape.push(out, op, ctx)
    }

    /// Matrix product; either side may carry a leading batch axis.
    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Self> {
        self.same_tape(rhs);
        let out = kernels::matmul(&self.value(), &rhs.value())?;
        self.tape.push(out, Op::MatMul(self.id, rhs.id), "matmul")
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        self.unary(Op::Transpose(self.id), "transpose", kernels::transpose)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.unary(Op::Reshape(self.id), "reshape", |t| t.reshape(shape))
    }

    fn binary(
        &self,
        rhs: &Var<'t>,
        op: Op,
        ctx: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        self.same_tape(rhs);
        let out = kernels::zip_broadcast(ctx, &self.value(), &rhs.value(), f)?;
        self.tape.push(out, op, ctx)
    }

    /// Element-wise sum; singleton extents stretch on either side.
    pub fn add(&self, rhs: &Var<'t>) -> Result<Self> {
        self.binary(rhs, Op::Add(self.id, rhs.id), "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Self> {
        self.binary(rhs, Op::Sub(self.id, rhs.id), "sub", |a, b| a - b)
    }

    /// Element-wise product; singleton extents stretch on either side.
    pub fn hadamard(&self, rhs: &Var<'t>) -> Result<Self> {
        self.binary(rhs, Op::Mul(self.id, rhs.id), "hadamard", |a, b| a * b)
    }

    /// `scale * x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Self> {
        self.unary(Op::Affine { x: self.id, scale }, "affine", |t| {
            Ok(t.map(|v| scale * v + shift))
        })
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        self.affine(factor, 0.0)
    }

    pub fn add_scalar(&self, shift: f64) -> Result<Self> {
        self.affine(1.0, shift)
    }

    /// Arithmetic mean along `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        self.unary(Op::MeanAxis { x: self.id, axis }, "mean_axis", |t| {
            kernels::mean_axis(t, axis)
        })
    }

    pub fn sum_all(&self) -> Result<Self> {
        self.unary(Op::SumAll(self.id), "sum_all", |t| {
            Ok(Tensor::scalar(t.data().iter().sum()))
        })
    }

    pub fn mean_all(&self) -> Result<Self> {
        let n = self.value().len() as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    /// Logistic map; outputs stay strictly inside (0, 1).
    pub fn sigmoid(&self) -> Result<Self> {
        self.unary(Op::Sigmoid(self.id), "sigmoid", |t| Ok(t.map(sigmoid)))
    }

    pub fn tanh(&self) -> Result<Self> {
        self.unary(Op::Tanh(self.id), "tanh", |t| Ok(t.map(f64::tanh)))
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary(Op::Relu(self.id), "relu", |t| Ok(t.map(|v| v.max(0.0))))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Self> {
        self.unary(Op::Gelu(self.id), "gelu", |t| Ok(t.map(gelu)))
    }

    pub fn exp(&self) -> Result<Self> {
        self.unary(Op::Exp(self.id), "exp", |t| Ok(t.map(f64::exp)))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        self.unary(Op::Softmax { x: self.id, axis }, "softmax", |t| {
            kernels::softmax(t, axis)
        })
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Self> {
        self.unary(Op::LogSoftmax { x: self.id, axis }, "log_softmax", |t| {
            kernels::log_softmax(t, axis)
        })
    }

    /// Stride-1 cross-correlation with "same" zero padding.
    /// `self` is `[C_in, H, W]` or `[B, C_in, H, W]`, `kernel` is
    /// `[C_out, C_in, k, k]` with odd `k`.
    pub fn conv2d(&self, kernel: &Var<'t>) -> Result<Self> {
        self.same_tape(kernel);
        let out = kernels::conv2d(&self.value(), &kernel.value())?;
        self.tape.push(
            out,
            Op::Conv2d {
                x: self.id,
                kernel: kernel.id,
            },
            "conv2d",
        )
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.unary(Op::Slice { x: self.id, axis, start }, "slice", |t| {
            kernels::slice(t, axis, start, len)
        })
    }

    /// Picks one entry per row along the last axis: `out[r] = x[r, idx[r]]`.
    pub fn pick(&self, indices: &[usize]) -> Result<Self> {
        let v = self.value();
        let k = *v.shape().last().expect("rank >= 1");
        let rows = v.len() / k;
        if indices.len() != rows || indices.iter().any(|&i| i >= k) {
            return Err(shape_err("pick", v.shape(), &[indices.len()]));
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| v.data()[r * k + i])
            .collect();
        self.tape.push(
            Tensor::raw(vec![rows], data),
            Op::Pick {
                x: self.id,
                indices: indices.to_vec(),
            },
            "pick",
        )
    }

    pub fn clamp_max(&self, max: f64) -> Result<Self> {
        self.unary(Op::ClampMax { x: self.id, max }, "clamp_max", |t| {
            Ok(t.map(|v| v.min(max)))
        })
    }

    /// Scales every row (last axis) to unit L2 norm.
    pub fn normalize_rows(&self) -> Result<Self> {
        let v = self.value();
        let k = *v.shape().last().expect("rank >= 1");
        let mut norms = Vec::with_capacity(v.len() / k);
        let mut data = Vec::with_capacity(v.len());
        for (r, row) in v.data().chunks(k).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < MIN_ROW_NORM {
                return Err(Error::Normalization(r));
            }
            norms.push(norm);
            data.extend(row.iter().map(|x| x / norm));
        }
        self.tape.push(
            Tensor::raw(v.shape().to_vec(), data),
            Op::NormalizeRows { x: self.id, norms },
            "normalize_rows",
        )
    }
}
