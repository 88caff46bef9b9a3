//! Reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every op applied during a forward pass. Each node stores
//! its value, its parent nodes and a closure that maps the gradient of the
//! node's output to gradients of its inputs. [`Tape::backward`] walks the
//! nodes in reverse creation order, so reduction order (and therefore every
//! accumulated gradient) is fixed by the forward program.
//!
//! Only the op set the network needs is provided; see the `ops_*` modules.

mod gradcheck;
mod ops_basic;
mod ops_conv;
mod ops_nn;

pub use gradcheck::{grad_check, grad_check_sampled, grad_check_vars, GradCheckReport};
pub use ops_nn::{BatchNormMode, BatchStats};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct BackCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

/// Maps the output gradient to one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter or checked point).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Vec::new(), None, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Vec::new(), None, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_node(
        &mut self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        backward: BackwardFn<T>,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let parents = parents.iter().map(|p| p.0).collect();
        let backward = requires_grad.then_some(backward);
        self.push_node(value, parents, backward, requires_grad)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::config(format!(
                "backward needs a scalar, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = BackCtx {
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, zeros if the loss does not depend on it.
    pub fn get_or_zeros(&self, tape: &Tape<T>, var: Var) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(var)))
    }
}
