//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! [`Tape`] it belongs to. [`Tape::backward`] walks the nodes in reverse
//! recording order and accumulates adjoints. Nodes that do not depend on any
//! gradient-requiring leaf store no backward closure at all, so inference on a
//! [`Tape::no_grad`] tape pays nothing for differentiation.

mod conv;
pub(crate) mod gemm;
mod ops;

use std::cell::RefCell;

pub use conv::PoolMode;

use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Tensor};

/// Maps the output adjoint to one adjoint per parent. `needs[i]` is false when
/// parent `i` does not require a gradient; the closure may return `None` there.
pub(crate) type Backward = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<Backward>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
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
            grad_enabled: true,
        }
    }

    /// A tape that never records adjoints; every value is a constant.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, self.grad_enabled)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Appends an operation result. `make_backward` is only invoked when some
    /// parent requires a gradient.
    pub(crate) fn record<F>(&self, value: Tensor, parents: &[Var<'_>], make_backward: F) -> Var<'_>
    where
        F: FnOnce() -> Backward,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && parents.iter().any(|p| nodes[p.id].requires_grad);
        let (parents, backward) = if requires_grad {
            (parents.iter().map(|p| p.id).collect(), Some(make_backward()))
        } else {
            (Vec::new(), None)
        };
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got {}",
                fmt_shape(root_node.value.shape())
            )));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        adjoints[root.id] = Some(vec![1.0]);
        let mut visited = Vec::new();
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(adjoint) = adjoints[id].as_ref() else {
                continue;
            };
            visited.push(id);
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(adjoint, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&parent, grad), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(grad) = grad else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(grad.len(), nodes[parent].value.numel());
                match &mut adjoints[parent] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        let grads = adjoints
            .into_iter()
            .zip(nodes.iter())
            .map(|(adj, node)| {
                adj.filter(|_| node.requires_grad)
                    .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads, visited })
    }
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// The same value as a constant: gradients stop here.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }
}

/// Adjoints produced by one [`Tape::backward`] sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, or `None` when `var` does
    /// not require a gradient or does not influence the root.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`wrt`](Self::wrt), with zeros for disconnected variables.
    pub fn wrt_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.wrt(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    /// Node ids whose adjoint was propagated, in processing order.
    pub fn visited(&self) -> &[usize] {
        &self.visited
    }
}
