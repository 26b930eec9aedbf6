//! Reverse-mode automatic differentiation over n-dimensional f64 arrays.
//!
//! A [`Tensor`] is an immutable row-major buffer plus the operation that
//! produced it; operations hold reference-counted handles to their inputs, so
//! a result keeps its whole history alive until dropped. [`Tensor::backward`]
//! walks that history once in reverse topological order and accumulates
//! gradients (`+=`) into every tensor that requires them.
//!
//! Everything is f64: the engine exists to train a desk-scale model whose
//! gradients are validated against finite differences, and that validation
//! budget buys more than single-precision throughput would.

mod gradcheck;
mod kernels;
mod ops;
mod shape;
mod store;

pub use gradcheck::{check_binary, check_unary, finite_diff, max_rel_err, FD_STEP};
pub use store::{ParameterStore, StoreError, PFDW_MAGIC, PFDW_VERSION};

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shapes {left:?} and {right:?} do not broadcast")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("matmul inner dimensions disagree: {left:?} vs {right:?}")]
    InnerDim { left: Vec<usize>, right: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("shape {shape:?} wants {expected} elements, got {got}")]
    ElementCount { shape: Vec<usize>, expected: usize, got: usize },
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("operation only valid on leaf tensors")]
    NotALeaf,
    #[error("{0}")]
    Invalid(String),
}

pub type TResult = Result<Tensor, TensorError>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_OFF: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` with gradient recording disabled: operations inside produce plain
/// value tensors with no history, so evaluation passes do not retain
/// activations.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_OFF.with(|c| c.replace(true));
    let out = f();
    GRAD_OFF.with(|c| c.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_OFF.with(|c| !c.get())
}

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    // Shared so that pure reshapes alias the buffer instead of copying it.
    data: Rc<RefCell<Vec<f64>>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: ops::Op,
}

/// Handle to a node of the differentiation graph. Cloning is cheap and both
/// clones refer to the same node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub(crate) fn make(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: ops::Op) -> Tensor {
        debug_assert_eq!(data.len(), shape::numel(&shape));
        let keep = requires_grad && grad_enabled();
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: Rc::new(RefCell::new(data)),
                requires_grad: keep,
                grad: RefCell::new(None),
                // Drop the history when nothing upstream needs gradients, so
                // evaluation graphs free their inputs eagerly.
                op: if keep { op } else { ops::Op::Leaf },
            }),
        }
    }

    pub(crate) fn make_shared(data: Rc<RefCell<Vec<f64>>>, shape: Vec<usize>, requires_grad: bool, op: ops::Op) -> Tensor {
        let keep = requires_grad && grad_enabled();
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad: keep,
                grad: RefCell::new(None),
                op: if keep { op } else { ops::Op::Leaf },
            }),
        }
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> TResult {
        let expected = shape::numel(shape);
        if data.len() != expected {
            return Err(TensorError::ElementCount { shape: shape.to_vec(), expected, got: data.len() });
        }
        Ok(Tensor::make(data, shape.to_vec(), false, ops::Op::Leaf))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::make(vec![0.0; shape::numel(shape)], shape.to_vec(), false, ops::Op::Leaf)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::make(vec![value; shape::numel(shape)], shape.to_vec(), false, ops::Op::Leaf)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::make(vec![value], vec![1], false, ops::Op::Leaf)
    }

    /// Marks a leaf as trainable. Gradients will accumulate into it on
    /// backward passes.
    pub fn with_grad(self) -> Tensor {
        assert!(matches!(self.inner.op, ops::Op::Leaf), "with_grad applies to leaf tensors");
        Tensor {
            inner: Rc::new(Inner {
                id: self.inner.id,
                shape: self.inner.shape.clone(),
                data: Rc::clone(&self.inner.data),
                requires_grad: true,
                grad: RefCell::new(self.inner.grad.borrow().clone()),
                op: ops::Op::Leaf,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        shape::numel(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Replaces the value of a leaf in place (the optimizer's update path).
    pub fn set_data(&self, data: Vec<f64>) -> Result<(), TensorError> {
        if !matches!(self.inner.op, ops::Op::Leaf) {
            return Err(TensorError::NotALeaf);
        }
        if data.len() != self.numel() {
            return Err(TensorError::ElementCount {
                shape: self.shape().to_vec(),
                expected: self.numel(),
                got: data.len(),
            });
        }
        *self.inner.data.borrow_mut() = data;
        Ok(())
    }

    /// A leaf copy of this tensor's value, cut loose from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.to_vec(), self.shape().to_vec(), false, ops::Op::Leaf)
    }

    /// Accumulates dLoss/dT into every reachable tensor that requires
    /// gradients. Calling twice without zeroing doubles the gradients.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss { numel: self.numel() });
        }
        let order = self.topo_order();
        let mut msgs: HashMap<u64, Vec<f64>> = HashMap::new();
        msgs.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(msg) = msgs.remove(&node.id()) else { continue };
            node.inner.op.backward(&node.inner, &msg, &mut msgs);
            let mut slot = node.inner.grad.borrow_mut();
            match slot.as_mut() {
                Some(g) => {
                    for (gi, mi) in g.iter_mut().zip(&msg) {
                        *gi += mi;
                    }
                }
                None => *slot = Some(msg),
            }
        }
        Ok(())
    }

    /// Post-order over the requires-grad subgraph (iterative; graphs from
    /// long rollouts can be deep).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        if !self.requires_grad() {
            return order;
        }
        // Stack entries: (node, next parent index to visit).
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, pi)) = stack.pop() {
            let parents = node.inner.op.parents();
            if pi < parents.len() {
                let parent = parents[pi].clone();
                stack.push((node, pi + 1));
                if parent.requires_grad() && visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

/// Sends a gradient contribution buffer to `parent`, returning a zeroed (or
/// previously accumulated) buffer to add into, or None when the parent does
/// not participate in differentiation.
pub(crate) fn msg_slot<'m>(
    msgs: &'m mut HashMap<u64, Vec<f64>>,
    parent: &Tensor,
) -> Option<&'m mut Vec<f64>> {
    if !parent.requires_grad() {
        return None;
    }
    Some(msgs.entry(parent.id()).or_insert_with(|| vec![0.0; parent.numel()]))
}
