//! A small reverse-mode automatic differentiation tape for dense f64 tensors.
//!
//! Gradients are themselves recorded on the tape, so calling [`Tape::grad`]
//! on an expression that already contains gradient nodes yields higher-order
//! derivatives. This is what makes bilevel optimization (differentiating
//! through an inner gradient step) possible: every primitive's backward rule
//! is expressed in terms of other primitives on the same tape.
//!
//! The operation set is deliberately minimal: elementwise arithmetic,
//! pointwise nonlinearities, reductions, 2-d convolution (plus its two
//! adjoints as first-class primitives), depthwise Gaussian blur, 2x
//! average-pool/nearest-upsample, and channel/spatial concatenation,
//! slicing and padding. That set is closed under differentiation.

mod conv;
mod grad;
mod ops;

pub use grad::all_finite;
pub use ops::Op;

use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;
use std::sync::Arc;

/// Dense tensor value held by a tape node.
pub type Value = ArrayD<f64>;

/// Handle to a node on a [`Tape`]. Cheap to copy; only meaningful together
/// with the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub(crate) value: Arc<Value>,
    pub(crate) op: Op,
}

/// Append-only record of a computation. Nodes refer to earlier nodes only,
/// so a reverse index sweep visits them in valid topological order.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
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

    pub(crate) fn push(&self, value: Value, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn val(&self, v: Var) -> Arc<Value> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Record an input tensor with no history.
    pub fn leaf(&self, value: Value) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Record a 0-d scalar leaf.
    pub fn constant(&self, x: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), x))
    }

    /// Copy of the value held at `v`.
    pub fn value(&self, v: Var) -> Arc<Value> {
        self.val(v)
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.val(v);
        assert_eq!(val.ndim(), 0, "scalar() called on a {}-d node", val.ndim());
        *val.first().unwrap()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.val(v).shape().to_vec()
    }

    /// Re-enter a value as a fresh leaf, cutting its gradient history.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.val(v);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(nodes.len() - 1)
    }
}
