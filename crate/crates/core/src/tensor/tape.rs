//! Recording state and graph nodes.
//!
//! Nodes are created append-only with strictly increasing ids, so every
//! parent has a smaller id than its child and sorting by id yields a
//! topological order. Nodes own their inputs through reference counting;
//! the graph reachable from a tensor is freed when the last tensor that
//! refers to it is dropped.

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::custom::CustomUnary;
use super::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static RECORDING: Cell<bool> = const { Cell::new(true) };
    static NODES_CREATED: Cell<u64> = const { Cell::new(0) };
}

/// Identifier of a recorded node. Ids grow monotonically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) u64);

/// Handle on the thread's recording state.
///
/// There is one tape per thread; recording can be suspended for a scope
/// with [`Tape::no_grad`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Tape;

impl Tape {
    pub fn is_recording() -> bool {
        RECORDING.with(Cell::get)
    }

    /// Run `f` with recording set to `on`, restoring the previous state after.
    pub fn with_recording<R>(on: bool, f: impl FnOnce() -> R) -> R {
        struct Restore(bool);
        impl Drop for Restore {
            fn drop(&mut self) {
                RECORDING.with(|r| r.set(self.0));
            }
        }
        let _restore = Restore(RECORDING.with(|r| r.replace(on)));
        f()
    }

    pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
        Self::with_recording(false, f)
    }

    /// Number of nodes appended by the current thread so far.
    pub fn nodes_created() -> u64 {
        NODES_CREATED.with(Cell::get)
    }
}

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Scale(f64),
    MatMul,
    Transpose,
    Reshape,
    Sum,
    Expand,
    LogSoftmax,
    Custom(Arc<dyn CustomUnary>),
}

impl Op {
    pub(crate) fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::Sum => "sum",
            Op::Expand => "expand",
            Op::LogSoftmax => "log_softmax",
            Op::Custom(c) => c.name(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) id: NodeId,
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Tensor>,
}

impl Node {
    pub(crate) fn new(op: Op, inputs: Vec<Tensor>) -> Arc<Node> {
        NODES_CREATED.with(|n| n.set(n.get() + 1));
        Arc::new(Node {
            id: NodeId(NEXT_ID.fetch_add(1, Ordering::Relaxed)),
            op,
            inputs,
        })
    }
}

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Node")
            .field("id", &self.id.0)
            .field("op", &self.op.name())
            .field("inputs", &self.inputs.len())
            .finish()
    }
}

// Long unrolled chains would otherwise overflow the stack through recursive drops.
impl Drop for Node {
    fn drop(&mut self) {
        let mut stack: Vec<Arc<Node>> = std::mem::take(&mut self.inputs)
            .into_iter()
            .filter_map(|mut t| t.node.take())
            .collect();
        while let Some(node) = stack.pop() {
            if let Ok(mut inner) = Arc::try_unwrap(node) {
                stack.extend(
                    std::mem::take(&mut inner.inputs)
                        .into_iter()
                        .filter_map(|mut t| t.node.take()),
                );
            }
        }
    }
}
