//! Reverse-mode tape.
//!
//! Nodes are appended in creation order, which is a topological order of the
//! computation, so the backward sweep is a single reverse pass over indices.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Backward rule: given the output gradient and which parents need one,
/// returns one optional gradient per parent.
pub(crate) type BackwardFn<E> = Box<dyn Fn(&Tensor<E>, &[bool]) -> Vec<Option<Tensor<E>>>>;

struct Node<E: Real> {
    value: Arc<Tensor<E>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<E>>,
    requires_grad: bool,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub struct Graph<E: Real = f32> {
    nodes: RefCell<Vec<Node<E>>>,
    consumed: Cell<bool>,
}

impl<E: Real> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node so the graph can be reused.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.consumed.set(false);
    }

    fn leaf(&self, value: Arc<Tensor<E>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Trainable leaf; its gradient is reported by [`Graph::backward`].
    pub fn param(&self, value: Arc<Tensor<E>>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<E>) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<E>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub(crate) fn push(
        &self,
        value: impl Into<Arc<Tensor<E>>>,
        parents: &[Var],
        backward: impl Fn(&Tensor<E>, &[bool]) -> Vec<Option<Tensor<E>>> + 'static,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: value.into(),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<E>),
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Accumulates d`loss`/d`leaf` for every trainable leaf.
    ///
    /// A tape supports one backward sweep; a second call fails until
    /// [`Graph::reset`] is called.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape().to_vec();
        if nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Tensor<E>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, E::one()));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = rule(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, need) else {
                    continue;
                };
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p] = Some(pg),
                }
            }
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.backward.is_some() || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<E: Real = f32> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Real> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
