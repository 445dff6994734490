//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and the ids of its
//! inputs, so node order is a topological order. [`Tape::backward`] walks the
//! nodes once in reverse, accumulating gradients additively.

mod gemm;
pub mod gradcheck;
mod ops;

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub(crate) use gemm::gemm;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a [`Tape`]. Handles are invalidated by
/// [`Tape::reset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u64,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    Sqrt(usize),
    Relu(usize),
    Sum(usize),
    MeanAxes(usize),
    Reshape(usize),
    Softmax(usize),
    Select(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Upsample(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    GlobalAvgPool(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::MeanAxes(..) => "mean_axes",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::Select(..) => "select",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample(..) => "upsample_nearest",
            Op::Linear { .. } => "linear",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::MeanAxes(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::Select(a, _)
            | Op::Upsample(a, _)
            | Op::GlobalAvgPool(a) => vec![*a],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Records operations for one forward/backward pass. Single-threaded.
pub struct Tape {
    id: Cell<u64>,
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    backward_done: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: Cell::new(fresh_id()),
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    /// Drops every recorded node and gradient. Outstanding [`Var`]s become
    /// invalid.
    pub fn reset(&self) {
        self.id.set(fresh_id());
        self.nodes.borrow_mut().clear();
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A gradient-tracked leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// An untracked leaf (inputs, targets).
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            tape: self.id.get(),
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id.get() || v.id >= self.nodes.borrow().len() {
            return Err(Error::state("variable does not belong to this tape"));
        }
        Ok(v.id)
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            id: nodes.len() - 1,
            tape: self.id.get(),
        })
    }

    pub fn value(&self, v: Var) -> Result<Tensor> {
        let id = self.check(v)?;
        Ok(self.nodes.borrow()[id].value.clone())
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        let id = self.check(v)?;
        Ok(self.nodes.borrow()[id].value.shape().to_vec())
    }

    /// Runs `f` on the recorded value without cloning it.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> Result<R> {
        let id = self.check(v)?;
        Ok(f(&self.nodes.borrow()[id].value))
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let id = self.check(v)?;
        Ok(self.nodes.borrow()[id].requires_grad)
    }

    /// Gradient of the last `backward` loss with respect to `v`. Tracked
    /// nodes unreachable from the loss get a zero gradient.
    pub fn grad(&self, v: Var) -> Result<Option<Tensor>> {
        let id = self.check(v)?;
        if !self.backward_done.get() {
            return Err(Error::state("grad requested before backward"));
        }
        let nodes = self.nodes.borrow();
        let node = &nodes[id];
        if !node.requires_grad {
            return Ok(None);
        }
        let grads = self.grads.borrow();
        let data = match &grads[id] {
            Some(g) => g.clone(),
            None => vec![0.0; node.value.len()],
        };
        Ok(Some(Tensor::new(node.value.shape(), data)?))
    }

    /// Populates gradients of the scalar `loss` with respect to every tracked
    /// node. Errors if `loss` is not a single value or if called twice without
    /// [`reset`](Tape::reset).
    pub fn backward(&self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        if self.backward_done.get() {
            return Err(Error::state("backward already ran on this tape; reset first"));
        }
        let nodes = self.nodes.borrow();
        if nodes[root].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad && !matches!(node.op, Op::Leaf) {
                ops::backward_node(&nodes, id, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }
}
