use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Computes parent gradients from the output gradient. `needs[i]` tells whether
/// parent `i` requires a gradient; entries for other parents may be `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order, so a reverse scan over node ids is a
/// valid reverse topological order. A tape supports exactly one backward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf. Tracked leaves receive gradients on backward.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: "leaf", value: Rc::new(value), requires_grad, parents: Vec::new(), backward: None });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Appends the result of an op. The backward closure is only kept when some
    /// parent requires a gradient.
    pub(crate) fn push<F>(&self, op: &'static str, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Result<Var<'_, T>>
    where
        F: Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let parent_ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = parent_ids.iter().any(|&p| nodes[p].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        nodes.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
            parents: if requires_grad { parent_ids } else { Vec::new() },
            backward,
        });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let nodes: Ref<'_, Vec<Node<T>>> = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::NotTracked);
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{} returned the wrong number of gradients", node.op);
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[p].value.numel());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
            // leaves keep their gradient; interior buffers were taken above
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let leaf = nodes.iter().map(|n| n.backward.is_none() && n.requires_grad).collect::<Vec<_>>();
        let grads = grads
            .into_iter()
            .zip(leaf)
            .map(|(g, is_leaf)| if is_leaf { g } else { None })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a tracked leaf; `None` if the loss does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads[var.id].as_ref().map(|g| Tensor::new(self.shapes[var.id].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient of a tracked leaf, zero-filled when the loss does not reach it.
    pub fn get_or_zero(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Same value as a new untracked constant (gradient flow stops here).
    pub fn detach(&self) -> Var<'t, T> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, T>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }
}
