use std::sync::atomic::{AtomicU64, Ordering};

use crate::float::Float;
use crate::graph::Graph;
use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        Self(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized by gradient descent.
    Weight,
    /// Persistent state updated outside the optimizer (batch-norm running stats).
    Buffer,
}

/// A named-by-position tensor owned by a layer.
#[derive(Debug)]
pub struct Param<T> {
    id: ParamId,
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub kind: ParamKind,
}

impl<T: Float> Param<T> {
    pub fn weight(value: Tensor<T>) -> Self {
        Self { id: ParamId::fresh(), value, requires_grad: true, kind: ParamKind::Weight }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Self { id: ParamId::fresh(), value, requires_grad: false, kind: ParamKind::Buffer }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn is_weight(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

// A clone is a different parameter: it must not alias the original in a graph.
impl<T: Clone> Clone for Param<T> {
    fn clone(&self) -> Self {
        Self { id: ParamId::fresh(), value: self.value.clone(), requires_grad: self.requires_grad, kind: self.kind }
    }
}

/// Anything that owns parameters.
pub trait Module<T: Float> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Number of trainable scalars (buffers excluded).
pub fn param_count<T: Float>(m: &dyn Module<T>) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, p| {
        if p.is_weight() {
            n += p.value.len();
        }
    });
    n
}

pub fn set_requires_grad<T: Float>(m: &mut dyn Module<T>, on: bool) {
    m.visit_mut("", &mut |_, p| {
        if p.is_weight() {
            p.requires_grad = on;
        }
    });
}

/// Fold batch statistics recorded in `g` into the module's running buffers.
pub fn apply_stat_updates<T: Float>(m: &mut dyn Module<T>, g: &Graph<T>) {
    let updates = g.stat_updates();
    if updates.is_empty() {
        return;
    }
    m.visit_mut("", &mut |_, p| {
        let id = p.id();
        for u in updates.iter().filter(|u| u.target == id) {
            let mom = T::c(u.momentum);
            let keep = T::one() - mom;
            for (r, &b) in p.value.data_mut().iter_mut().zip(u.batch_value.data()) {
                *r = keep * *r + mom * b;
            }
        }
    });
}

/// Bit patterns of every parameter and buffer, in visiting order.
pub fn snapshot_bits<T: Float>(m: &dyn Module<T>) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, p| out.push((name.to_string(), T::to_le_bytes_vec(p.value.data()))));
    out
}

/// Names and shapes, in visiting order.
pub fn named_shapes<T: Float>(m: &dyn Module<T>) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, p| out.push((name.to_string(), p.value.shape().to_vec())));
    out
}
