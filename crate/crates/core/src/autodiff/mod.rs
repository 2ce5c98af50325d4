//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every value produced while a [`Tape`] is live is stored in the tape and
//! addressed by a copyable [`Var`] handle. Because nodes are appended as
//! they are computed, creation order is already a topological order and the
//! backward pass is a single reverse sweep.

pub(crate) mod gradcheck;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheck};

use crate::error::{Error, Result};
use crate::ops::{self, BinaryKind, Conv2dOptions, ReduceKind, UnaryKind};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation families, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Linear,
    Add,
    Mul,
    Scale,
    Gelu,
    Sigmoid,
    Softmax,
    LayerNorm,
    Conv2d,
    Reduce,
    Reshape,
    Permute,
    Concat,
    BceLoss,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::MatMul,
        OpKind::Linear,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Conv2d,
        OpKind::Reduce,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Concat,
        OpKind::BceLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Conv2d => "conv2d",
            OpKind::Reduce => "reduce",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::BceLoss => "bce_loss",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, bias: Option<Var> },
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Conv2d { x: Var, w: Var, bias: Var, opts: Conv2dOptions },
    Reduce { kind: ReduceKind, x: Var, axes: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, order: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Bce { logits: Var, target: Tensor },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Binary(BinaryKind::Add, ..) => OpKind::Add,
            Op::Binary(BinaryKind::Mul, ..) => OpKind::Mul,
            Op::Unary(UnaryKind::Scale(_), _) => OpKind::Scale,
            Op::Unary(UnaryKind::Gelu, _) => OpKind::Gelu,
            Op::Unary(UnaryKind::Sigmoid, _) => OpKind::Sigmoid,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Reduce { .. } => OpKind::Reduce,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Bce { .. } => OpKind::BceLoss,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true, fault: None }
    }

    /// A tape that evaluates values but records no backward information.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), recording: false, fault: None }
    }

    /// Test hook: perturb the backward rule of one operation family so the
    /// gradient checker can demonstrate it notices.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf (parameter or differentiated input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = self.recording;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(out, Op::Linear { x, w, bias }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let out = ops::binary(kind, self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Binary(kind, a, b), &[a, b]))
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let out = ops::unary(kind, self.value(x));
        self.push(out, Op::Unary(kind, x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let out = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }, &[x, gamma, beta]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, opts: Conv2dOptions) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), self.value(bias), opts)?;
        Ok(self.push(out, Op::Conv2d { x, w, bias, opts }, &[x, w, bias]))
    }

    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize]) -> Result<Var> {
        let out = ops::reduce(kind, self.value(x), axes)?;
        Ok(self.push(out, Op::Reduce { kind, x, axes: axes.to_vec() }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(ReduceKind::Sum, x, &axes).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(ReduceKind::Mean, x, &axes).expect("all axes are valid")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let out = ops::permute(self.value(x), order)?;
        Ok(self.push(out, Op::Permute { x, order: order.to_vec() }, &[x]))
    }

    /// Swap the trailing two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::ShapeMismatch(format!("transpose of rank-{r} value")));
        }
        let mut order: Vec<usize> = (0..r).collect();
        order.swap(r - 2, r - 1);
        self.permute(x, &order)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat(&values, axis)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Mean binary cross-entropy of `logits` against a fixed binary target.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let loss = ops::bce_with_logits(self.value(logits), target)?;
        Ok(self.push(Tensor::scalar(loss), Op::Bce { logits, target: target.clone() }, &[logits]))
    }

    /// Reverse sweep from a single-element `loss`, seeded with 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::DetachedFromTape);
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        slots[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(grad) = slots[id].take() else { continue };
            let node = &self.nodes[id];
            let mut contributions = self.node_backward(node, &grad);
            if node.op.kind().is_some() && node.op.kind() == self.fault {
                for (_, g) in contributions.iter_mut() {
                    g.iter_mut().for_each(|v| *v *= 1.1);
                }
            }
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut slots[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            slots[id] = Some(grad);
        }
        let grads = slots
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                let node = &self.nodes[id];
                match g {
                    Some(g) if node.requires_grad => {
                        Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (ga, gb) = ops::matmul_backward(val(*a), val(*b), grad);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Linear { x, w, bias } => {
                let (gx, gw, gb) = ops::linear_backward(val(*x), val(*w), grad);
                let mut out = vec![(*x, gx), (*w, gw)];
                if let Some(b) = bias {
                    out.push((*b, gb));
                }
                out
            }
            Op::Binary(kind, a, b) => {
                let (ga, gb) = ops::binary_backward(*kind, val(*a), val(*b), node.value.shape(), grad);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Unary(kind, x) => vec![(*x, ops::unary_backward(*kind, val(*x), &node.value, grad))],
            Op::Softmax { x, axis } => vec![(*x, ops::softmax_backward(&node.value, *axis, grad))],
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (gx, gg, gb) = ops::layer_norm_backward(val(*x), val(*gamma), *eps, grad);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Conv2d { x, w, bias, opts } => {
                let (gx, gw, gb) = ops::conv2d_backward(val(*x), val(*w), *opts, grad);
                vec![(*x, gx), (*w, gw), (*bias, gb)]
            }
            Op::Reduce { kind, x, axes } => {
                vec![(*x, ops::reduce_backward(*kind, val(*x), axes, grad))]
            }
            Op::Reshape(x) => vec![(*x, grad.to_vec())],
            Op::Permute { x, order } => {
                vec![(*x, ops::permute_backward(val(*x).shape(), order, grad))]
            }
            Op::Concat { parts, axis } => {
                let shapes: Vec<Vec<usize>> = parts.iter().map(|p| val(*p).shape().to_vec()).collect();
                parts.iter().copied().zip(ops::concat_backward(&shapes, *axis, grad)).collect()
            }
            Op::Bce { logits, target } => {
                vec![(*logits, ops::bce_backward(val(*logits), target, grad[0]))]
            }
        }
    }
}
