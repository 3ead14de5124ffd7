//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Tape`] records one forward computation as a Wengert list. Each node
//! stores its forward value, its parents, and an adjoint closure that maps
//! the output gradient to per-parent gradients. [`Tape::backward`] walks the
//! list in reverse and accumulates gradients; nodes are already in
//! topological order because ops can only reference earlier nodes.
//!
//! The tape is single-threaded; individual kernels may parallelize
//! internally over disjoint output regions.

pub mod ops;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

/// Adjoint closure: (grad_out, out_value, parent_values, parent_needs_grad)
/// -> per-parent gradients (None where not needed).
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &Tensor<T>, &[&Tensor<T>], &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub parents: Vec<Value>,
    pub needs_grad: bool,
    pub backward: Option<BackwardFn<T>>,
}

/// Recorded forward computation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an input node. Gradients flow into it only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Value {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            needs_grad: requires_grad,
            backward: None,
        });
        Value(self.nodes.len() - 1)
    }

    /// Input node that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Value {
        self.leaf(value, false)
    }

    /// Forward value of a node.
    pub fn value(&self, v: Value) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Whether gradients will flow through any of these nodes (ops use this
    /// to skip saving intermediates on grad-free paths).
    pub(crate) fn any_needs_grad(&self, vs: &[Value]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub(crate) fn push_op(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Value>,
        backward: BackwardFn<T>,
    ) -> Value {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            needs_grad,
            backward: if needs_grad { Some(backward) } else { None },
        });
        Value(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate (`+=`) when a
    /// node feeds several consumers; the result owns one gradient per node
    /// that required one.
    pub fn backward(&self, loss: Value) -> Result<Gradients<T>> {
        let out = &self.nodes[loss.0].value;
        if out.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(out.shape().to_vec()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(bw) = node.backward.as_ref() else {
                continue; // leaf: keep its accumulated gradient
            };
            let Some(g) = grads[id].take() else {
                continue; // did not influence the loss
            };
            let inputs: Vec<&Tensor<T>> = node
                .parents
                .iter()
                .map(|p| &self.nodes[p.0].value)
                .collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].needs_grad)
                .collect();
            let parent_grads = bw(&g, &node.value, &inputs, &needs)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one reverse pass, indexed by [`Value`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Value) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Value) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![2, 2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(vec![2, 3], |i| i as f64), true);
        let s = tape.sum_all(x).unwrap();
        let grads = tape.backward(s).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data(), &[1.0; 6]);
    }

    #[test]
    fn sigmoid_sum_grad_at_zero_is_quarter() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![4]), true);
        let s = tape.sigmoid(x);
        let loss = tape.sum_all(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        for &g in grads.get(x).unwrap().data() {
            assert!((g - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn grads_accumulate_across_consumers() {
        // loss = sum(x) + sum(x) => grad = 2 per element.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![3]), true);
        let a = tape.sum_all(x).unwrap();
        let b = tape.sum_all(x).unwrap();
        let loss = tape.add(a, b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![3]), true);
        let c = tape.constant(Tensor::full(vec![3], 2.0));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
