//! Parameterized layers built on [`Graph`] ops.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::ops::norm::BatchNormMode;
use crate::param::{join, Module, Param};
use crate::tensor::Tensor;

/// Normal(0, std) samples.
pub fn normal<T: Float, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let d = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::c(d.sample(rng)))
}

/// Normal(0, std) truncated to two standard deviations by resampling.
pub fn trunc_normal<T: Float, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let d = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = d.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::c(v);
        }
    })
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Float> Conv2d<T> {
    /// He-normal weights (fan-in scaled), zero bias.
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool, rng: &mut R) -> Self {
        let fan_in = cin * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        Self::with_weight(normal(&[cout, cin, k, k], std, rng), bias, stride, pad)
    }

    pub fn with_weight(weight: Tensor<T>, bias: bool, stride: usize, pad: usize) -> Self {
        let cout = weight.dim(0);
        Self {
            weight: Param::weight(weight),
            bias: bias.then(|| Param::weight(Tensor::zeros(&[cout]))),
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::weight(Tensor::ones(&[channels])),
            beta: Param::weight(Tensor::zeros(&[channels])),
            running_mean: Param::buffer(Tensor::zeros(&[channels])),
            running_var: Param::buffer(Tensor::ones(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, train: bool) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let mode = if train {
            BatchNormMode::Train {
                running_mean: self.running_mean.id(),
                running_var: self.running_var.id(),
                momentum: self.momentum,
            }
        } else {
            BatchNormMode::Eval { mean: &self.running_mean.value, var: &self.running_var.value }
        };
        g.batch_norm2d(x, gamma, beta, mode, self.eps)
    }
}

impl<T: Float> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Float> Linear<T> {
    /// Truncated-normal (std 0.02) weights, zero bias.
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self { weight: Param::weight(trunc_normal(&[d_out, d_in], 0.02, rng)), bias: Param::weight(Tensor::zeros(&[d_out])) }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.linear(x, w, Some(b))
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

impl<T: Float> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self { gamma: Param::weight(Tensor::ones(&[d])), beta: Param::weight(Tensor::zeros(&[d])), eps: 1e-6 }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

impl<T: Float> Module<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}
