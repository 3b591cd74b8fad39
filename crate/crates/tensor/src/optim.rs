use std::collections::HashMap;

use crate::float::Float;
use crate::graph::Gradients;
use crate::param::{Module, ParamId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    steps: u64,
}

/// Adam with decoupled weight decay. Moment state is keyed by parameter
/// name, so a module can be rebuilt (e.g. from a checkpoint) between steps.
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    state: HashMap<String, Moments<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, state: HashMap::new() }
    }

    /// Update every trainable parameter that received a gradient.
    /// `lr_for(name)` returns the learning rate for that parameter, or
    /// `None` to leave it untouched.
    pub fn step(&mut self, module: &mut dyn Module<T>, grads: &Gradients<T>, lr_for: &dyn Fn(&str) -> Option<f64>) {
        self.apply(module, &|_, id| grads.by_id(id), lr_for);
    }

    /// Like [`AdamW::step`] with gradients summed over micro-batches.
    pub fn step_accumulated(&mut self, module: &mut dyn Module<T>, acc: &GradAccumulator<T>, lr_for: &dyn Fn(&str) -> Option<f64>) {
        self.apply(module, &|name, _| acc.sums.get(name), lr_for);
    }

    fn apply<'g>(
        &mut self,
        module: &mut dyn Module<T>,
        grad_of: &dyn Fn(&str, ParamId) -> Option<&'g Tensor<T>>,
        lr_for: &dyn Fn(&str) -> Option<f64>,
    ) where
        T: 'g,
    {
        let cfg = self.cfg;
        let state = &mut self.state;
        module.visit_mut("", &mut |name, p| {
            if !p.is_weight() || !p.requires_grad {
                return;
            }
            let Some(g) = grad_of(name, p.id()) else { return };
            let Some(lr) = lr_for(name) else { return };
            let st = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
                steps: 0,
            });
            st.steps += 1;
            let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
            let bc1 = T::c(1.0 - cfg.beta1.powi(st.steps as i32));
            let bc2 = T::c(1.0 - cfg.beta2.powi(st.steps as i32));
            let lr_t = T::c(lr);
            let decay = T::one() - T::c(lr * cfg.weight_decay);
            let eps = T::c(cfg.eps);
            let it = p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.data_mut().iter_mut().zip(st.v.data_mut().iter_mut()));
            for ((w, &gi), (m, v)) in it {
                *w *= decay;
                *m = b1 * *m + (T::one() - b1) * gi;
                *v = b2 * *v + (T::one() - b2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}

/// Running sum of parameter gradients keyed by name, for gradient
/// accumulation across micro-batches.
pub struct GradAccumulator<T> {
    sums: HashMap<String, Tensor<T>>,
    count: usize,
}

impl<T: Float> Default for GradAccumulator<T> {
    fn default() -> Self {
        Self { sums: HashMap::new(), count: 0 }
    }
}

impl<T: Float> GradAccumulator<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add `weight * grad` for every parameter of `module` present in `grads`.
    pub fn add(&mut self, module: &dyn Module<T>, grads: &Gradients<T>, weight: f64) {
        let w = T::c(weight);
        module.visit("", &mut |name, p| {
            if let Some(g) = grads.by_id(p.id()) {
                let scaled = g.map(|v| v * w);
                match self.sums.get_mut(name) {
                    Some(s) => s.add_assign(&scaled),
                    None => {
                        self.sums.insert(name.to_string(), scaled);
                    }
                }
            }
        });
        self.count += 1;
    }

    pub fn micro_batches(&self) -> usize {
        self.count
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.sums.get(name)
    }

    pub fn clear(&mut self) {
        self.sums.clear();
        self.count = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::param::{join, Param};

    struct One(Param<f64>);

    impl Module<f64> for One {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f(&join(prefix, "w"), &self.0);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(&join(prefix, "w"), &mut self.0);
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut m = One(Param::weight(Tensor::new(&[2], vec![1.0, -1.0]).unwrap()));
        let mut g = Graph::new();
        let w = g.param(&m.0);
        let s = g.sum_all(w);
        let grads = g.backward(s);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut m, &grads, &|_| Some(0.1));
        let d = m.0.value.data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 1.1).abs() < 1e-6);
    }

    #[test]
    fn skipped_group_is_untouched() {
        let mut m = One(Param::weight(Tensor::new(&[1], vec![2.0]).unwrap()));
        let mut g = Graph::new();
        let w = g.param(&m.0);
        let s = g.sum_all(w);
        let grads = g.backward(s);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut m, &grads, &|_| None);
        assert_eq!(m.0.value.data()[0].to_bits(), 2.0f64.to_bits());
    }

    #[test]
    fn accumulated_halves_match_full_step() {
        let run = |split: bool| {
            let mut m = One(Param::weight(Tensor::new(&[2], vec![0.5, 1.5]).unwrap()));
            let mut opt = AdamW::new(AdamWConfig::default());
            let mut acc = GradAccumulator::new();
            for k in [1.0, 3.0] {
                let mut g = Graph::new();
                let w = g.param(&m.0);
                let s = g.scale(w, k);
                let s = g.sum_all(s);
                let grads = g.backward(s);
                acc.add(&m, &grads, 0.5);
            }
            if split {
                opt.step_accumulated(&mut m, &acc, &|_| Some(0.01));
            } else {
                let mut g = Graph::new();
                let w = g.param(&m.0);
                let s = g.scale(w, 2.0);
                let s = g.sum_all(s);
                let grads = g.backward(s);
                opt.step(&mut m, &grads, &|_| Some(0.01));
            }
            m.0.value.data().to_vec()
        };
        assert_eq!(run(true), run(false));
    }
}
