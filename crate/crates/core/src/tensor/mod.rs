//! Dense float64 tensors with a reverse-mode differentiation tape.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer plus an optional
//! node handle. Tensors with a node participate in differentiation; all
//! others are constants. Backward rules are written in terms of tensor ops,
//! so running the backward pass while recording yields a differentiable
//! gradient (used for Hessian-vector products and unrolled optimization).

pub mod alloc;
mod backward;
mod custom;
pub mod flat;
mod loss;
mod ops;
mod optim;
mod second_order;
mod tape;

use std::fmt;
use std::sync::Arc;

pub use backward::{grad, vjp};
pub use custom::CustomUnary;
pub use loss::{
    mse, per_sample_cross_entropy, softmax_cross_entropy, weighted_softmax_cross_entropy,
};
pub use optim::{sgd_step_functional, MomentumState, Optimizer, OptimizerHyper, OptimizerKind};
pub use second_order::{cross_vjp, hvp, HessianOperator};
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};
use tape::{Node, Op};

pub(crate) struct Storage {
    data: Vec<f64>,
}

impl Storage {
    fn new(data: Vec<f64>) -> Self {
        alloc::track_alloc(data.len() * std::mem::size_of::<f64>());
        Storage { data }
    }
}

impl Clone for Storage {
    fn clone(&self) -> Self {
        Storage::new(self.data.clone())
    }
}

impl Drop for Storage {
    fn drop(&mut self) {
        alloc::track_free(self.data.len() * std::mem::size_of::<f64>());
    }
}

/// Dense row-major array of `f64`.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Arc<Storage>,
    pub(crate) node: Option<Arc<Node>>,
}

impl Tensor {
    /// Build a constant tensor. Zero-sized dimensions are rejected.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!(
                "zero-size dimension in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self::raw(shape.to_vec(), data))
    }

    /// Build a tensor; when `requires_grad` is set a leaf node is recorded.
    pub fn create(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(if requires_grad { t.requires_grad() } else { t })
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            storage: Arc::new(Storage::new(data)),
            node: None,
        }
    }

    /// Result of an op: recorded when recording is on and any input is recorded.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[&Tensor]) -> Self {
        let mut out = Self::raw(shape, data);
        if Tape::is_recording() && inputs.iter().any(|t| t.node.is_some()) {
            out.node = Some(Node::new(op, inputs.iter().map(|t| (*t).clone()).collect()));
        }
        out
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(Vec::new(), vec![value])
    }

    /// 1-D tensor. Panics on an empty slice.
    pub fn vector(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "empty vector");
        Self::raw(vec![values.len()], values.to_vec())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn zeros_like(&self) -> Self {
        Self::raw(self.shape.clone(), vec![0.0; self.numel()])
    }

    pub fn ones_like(&self) -> Self {
        Self::raw(self.shape.clone(), vec![1.0; self.numel()])
    }

    /// Constant with the same shape and the given data.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(&self.shape, data)
    }

    /// Mark as a differentiable leaf. A fresh leaf node is created even if
    /// the tensor was already recorded.
    pub fn requires_grad(self) -> Self {
        Tensor {
            node: Some(Node::new(Op::Leaf, Vec::new())),
            ..self
        }
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            storage: Arc::clone(&self.storage),
            node: None,
        }
    }

    /// Deep copy detached from the graph.
    pub fn deep_copy(&self) -> Self {
        Self::raw(self.shape.clone(), self.data().to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.storage.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.storage.data
    }

    /// Mutable access to the buffer. Copy-on-write: graphs that saved this
    /// tensor keep the old values. The node handle is kept.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut Arc::make_mut(&mut self.storage).data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data()[0])
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn is_recorded(&self) -> bool {
        self.node.is_some()
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.node.as_deref(), Some(Node { op: Op::Leaf, .. }))
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Name of the op that produced this tensor, if recorded.
    pub fn op_name(&self) -> Option<&str> {
        self.node.as_ref().map(|n| n.op.name())
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|x| x.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if data.len() <= 16 {
            s.field("data", &data);
        } else {
            s.field("data", &format_args!("{:?}...", &data[..8]));
        }
        s.field("node", &self.node.as_ref().map(|n| n.id.0))
            .finish()
    }
}
