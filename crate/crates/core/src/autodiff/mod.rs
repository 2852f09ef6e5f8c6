//! Reverse-mode differentiation over a recorded computation graph.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order. [`Tape::backward`] walks that order in reverse exactly once and
//! returns the gradient of a scalar loss with respect to every node that
//! requires a gradient.

mod backward;
mod kernels;
mod ops;

use alloc::vec::Vec;
use core::cell::{Cell, Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use kernels::{conv3d_output_dims, Conv3dSpec};
pub use ops::{attention, attention_with_weights};

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    ScaleBy(NodeId, NodeId),
    Matmul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Reshape(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    Sigmoid(NodeId),
    Silu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MeanRows(NodeId),
    BiasAdd(NodeId, NodeId),
    IndexRows(NodeId, Vec<usize>),
    PickPerRow(NodeId, Vec<usize>),
    ConcatLast(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Conv3d {
        x: NodeId,
        w: NodeId,
        spec: Conv3dSpec,
    },
    TemporalConv {
        x: NodeId,
        kernel: NodeId,
    },
    AvgPool3(NodeId, [usize; 3]),
    Upsample3(NodeId, [usize; 3]),
    LayerNormRows {
        x: NodeId,
        rstd: Vec<f64>,
    },
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    spent: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            spent: Cell::new(false),
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that is excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
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

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one. A tape can be differentiated once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !core::ptr::eq(loss.tape, self) {
            return Err(Error::Graph("loss belongs to a different tape"));
        }
        if self.spent.replace(true) {
            return Err(Error::Graph("backward already ran on this tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Graph("loss must be a scalar"));
        }
        let grads = backward::run(&nodes, loss.id);
        Ok(Gradients { grads })
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: NodeId,
}

impl core::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }
}

/// Gradient table keyed by node id.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.by_id(v.id)
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}
