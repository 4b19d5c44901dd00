use std::cell::RefCell;
use std::fmt;

use super::value::Tensor;
use crate::error::{contract_err, Result};

/// Saved state needed to replay one primitive's adjoint.
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { input: usize, rows: usize, cols: usize },
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    SliceCols { input: usize, start: usize, width: usize },
    GatherRows { input: usize, index: Vec<usize> },
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64>, train: bool },
    Relu(usize),
    Gelu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Softplus(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Softplus(a) => vec![*a],
            Op::Transpose { input, .. } | Op::SliceCols { input, .. } | Op::GatherRows { input, .. } => {
                vec![*input]
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { x, gain, bias, .. } | Op::BatchNorm { x, gain, bias, .. } => {
                vec![*x, *gain, *bias]
            }
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Append-only record of a forward computation.
///
/// A tape built with [`Tape::inference`] stores forward values only; no
/// adjoint state is kept and [`Var::backward`] is rejected.
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: true }
    }

    /// Tape that keeps forward values but records no operations.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of nodes carrying a differentiable operation.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.borrow().iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    /// Leaf node. `requires_grad` is ignored on an inference tape.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_node(value, requires_grad && self.recording, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        if !self.recording {
            return self.push_node(value, false, Op::Leaf);
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_node(value, requires_grad, op)
    }

    fn push_node(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, op });
        Var { tape: self, id: nodes.len() - 1 }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// First element of the forward value.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Runs the recorded adjoints in reverse order from this scalar.
    pub fn backward(&self) -> Result<Gradients> {
        if !self.tape.recording {
            return contract_err("backward called on an inference tape");
        }
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if !root.value.is_scalar() {
            return contract_err(format!(
                "backward needs a 0-dimensional loss, got shape {:?}",
                root.value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[self.id] = Some(vec![1.0]);
        }
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !matches!(node.op, Op::Leaf) {
                super::ops::backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Adjoints produced by one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` if `var` does not
    /// require grad or is not an ancestor of the loss.
    pub fn get(&self, var: &Var<'_>) -> Option<Tensor> {
        self.get_id(var.id)
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<Tensor> {
        let g = self.grads.get(id)?.as_ref()?;
        Tensor::new(self.shapes[id].clone(), g.clone()).ok()
    }

    pub(crate) fn take_id(&mut self, id: usize) -> Option<Vec<f64>> {
        self.grads.get_mut(id)?.take()
    }
}

/// Adds `f`'s contribution into the adjoint slot of `id`.
pub(crate) fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}
