//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! execution order, which is already a topological order. [`Graph::backward`]
//! replays the tape in reverse and returns the gradient of a scalar loss with
//! respect to every leaf created with `requires_grad`.
//!
//! Every operation checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] instead of propagating non-finite values.

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod reduce;
mod shape_ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use conv::{conv2d_output_size, Padding};
pub(crate) use elementwise::inverse_softplus;
#[cfg(test)]
pub(crate) use elementwise::softplus;
pub(crate) use reduce::softmax_rows;

/// Vector-Jacobian product of one recorded operation. Receives the upstream
/// gradient and a mask of which parents need a gradient; returns one entry
/// per parent.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    op: &'static str,
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    is_leaf: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Recording tape. Not `Send`: recording is confined to one thread.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            value: Rc::new(value),
            requires_grad,
            is_leaf: true,
            parents: Vec::new(),
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, x: T) -> Var {
        self.constant(Tensor::scalar(x))
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes.borrow()[v.0].op
    }

    /// Same value, cut from the tape: no gradient flows through the result.
    pub fn detach(&self, v: Var) -> Var {
        let value = (*self.value(v)).clone();
        self.constant(value)
    }

    /// Records an operation with a caller-supplied backward rule. All
    /// built-in operations go through here as well.
    pub fn custom(
        &self,
        op: &'static str,
        parents: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
            is_leaf: false,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Gradients of a scalar `loss` with respect to every `requires_grad`
    /// leaf. Leaves the loss does not depend on get a zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if node.is_leaf || !node.requires_grad {
                continue;
            }
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad_out, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
            for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else {
                    continue;
                };
                if g.shape() != nodes[p].value.shape() {
                    return Err(Error::shape(
                        node.op,
                        format!(
                            "backward produced gradient {:?} for input {:?}",
                            g.shape(),
                            nodes[p].value.shape()
                        ),
                    ));
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }

        let mut out = Vec::with_capacity(nodes.len());
        for (id, node) in nodes.iter().enumerate() {
            if node.is_leaf && node.requires_grad {
                let g = grads[id].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                if !g.all_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let loss = g.sum_all(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient_is_twice_x() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn every_leaf_gets_exactly_one_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let unused = g.param(Tensor::from_vec(vec![5.0]));
        let c = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let y2 = g.add(y, x).unwrap();
        let loss = g.sum_all(y2).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 5.0]);
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![0.0]));
        assert!(matches!(g.ln(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![2.0]));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }
}
