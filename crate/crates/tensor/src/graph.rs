//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each node stores its
//! value and, when any input requires a gradient, a closure that maps the
//! output gradient to input gradients. [`Graph::backward`] walks the tape in
//! reverse creation order, which is a valid topological order.

use std::collections::HashMap;

use crate::float::Float;
use crate::param::{Param, ParamId};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees.
pub struct BackwardCtx<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// `needs[i]` is false when input `i` is not on a path to any trainable
    /// leaf; closures may skip that gradient and return `None`.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Running-statistic update emitted by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub target: ParamId,
    pub batch_value: Tensor<T>,
    pub momentum: f64,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), stat_updates: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), requires_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Bind a parameter as a leaf. Binding the same parameter twice returns
    /// the same node so gradients accumulate in one place.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.bound.get(&p.id()) {
            return v;
        }
        let v = self.leaf(p.value.clone(), p.requires_grad);
        self.bound.insert(p.id(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record an operation. The closure is dropped when no input needs a
    /// gradient.
    pub fn push_op(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            requires_grad,
            backward: if requires_grad { Some(backward) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn push_stat_update(&mut self, update: StatUpdate<T>) {
        self.stat_updates.push(update);
    }

    pub fn stat_updates(&self) -> &[StatUpdate<T>] {
        &self.stat_updates
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (inp, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[inp.0].value.shape());
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads, bound: self.bound.clone() }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.by_id(p.id())
    }

    pub fn by_id(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.bound.get(&id).and_then(|v| self.get(*v))
    }
}
