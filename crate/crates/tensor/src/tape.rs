//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends a node holding its parents and a
//! one-shot backward closure. Node ids are assigned in execution order, so a
//! reverse sweep over ids is a valid topological order. Values live in the
//! [`Var`] handles themselves; the tape only keeps what the backward closures
//! captured.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::tensor::Tensor;

/// Backward closure: receives the output gradient and a mask saying which
/// parents need a gradient, returns one optional gradient per parent.
pub type BackwardFn = Box<dyn FnOnce(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Records operations for a single forward/backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    low_precision: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Empty tape. Also switches the calling thread to flushing subnormals
    /// (see [`crate::flush_subnormals`]).
    pub fn new() -> Self {
        crate::flush_subnormals();
        Self {
            nodes: RefCell::new(Vec::new()),
            low_precision: Cell::new(false),
        }
    }

    /// Enables bfloat16 rounding of matmul/convolution operands.
    pub fn set_low_precision(&self, on: bool) {
        self.low_precision.set(on);
    }

    pub fn low_precision(&self) -> bool {
        self.low_precision.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.constant_arc(Arc::new(value))
    }

    pub fn constant_arc(&self, value: Arc<Tensor>) -> Var<'_> {
        Var {
            tape: self,
            id: None,
            value,
        }
    }

    /// A differentiable input (typically a parameter).
    pub fn leaf(&self, value: Arc<Tensor>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            id: Some(id),
            value,
        }
    }

    /// Appends an operation. If no parent is differentiable the result is a
    /// constant and `backward` is dropped unused.
    pub fn record<'t>(
        &'t self,
        value: Tensor,
        parents: &[&Var<'t>],
        backward: impl FnOnce(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        for p in parents {
            assert!(std::ptr::eq(p.tape, self), "variables from different tapes");
        }
        if parents.iter().all(|p| p.id.is_none()) {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id.unwrap_or(usize::MAX)).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            tape: self,
            id: Some(id),
            value: Arc::new(value),
        }
    }

    /// Back-propagates from a scalar output, consuming the recorded closures.
    ///
    /// Only gradients of leaf nodes are retained in the result.
    pub fn backward(&self, output: &Var<'_>) -> Grads {
        assert_eq!(output.value.numel(), 1, "backward() needs a scalar output");
        let Some(root) = output.id else {
            return Grads { grads: Vec::new() };
        };
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(output.value.shape().to_vec(), 1.0));
        for id in (0..=root).rev() {
            let node = &mut nodes[id];
            let Some(backward) = node.backward.take() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| p != usize::MAX).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if p == usize::MAX {
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
        Grads { grads }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        var.id.and_then(|id| self.grads.get(id)).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: &Var<'_>) -> Option<Tensor> {
        var.id.and_then(|id| self.grads.get_mut(id)).and_then(Option::take)
    }
}

/// A value on a tape, optionally differentiable.
#[derive(Clone)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: Option<usize>,
    pub(crate) value: Arc<Tensor>,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_arc(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant_arc(self.value_arc())
    }
}
