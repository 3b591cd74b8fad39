//! Parameter counts and forward latency of prompt modules.

use std::time::Instant;

use gp_tensor::param::param_count;
use gp_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::prompting::PromptModule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub param_count: usize,
    /// Median wall-clock milliseconds per batch-1 forward.
    pub latency_ms: f64,
    pub image_size: usize,
    pub warmup: usize,
    pub runs: usize,
}

/// Time eval-mode forwards on a fixed pre-normalized input. Input
/// preparation happens once, outside the timed region.
pub fn resource_report<M: PromptModule<f32>>(m: &M, image_size: usize, warmup: usize, runs: usize) -> Result<ResourceReport> {
    if runs == 0 {
        return Err(GpError::InvalidArgument("need at least one timed run".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = gp_tensor::nn::normal::<f32, _>(&[1, 3, image_size, image_size], 1.0, &mut rng);
    let d = m.needs_depth().then(|| Tensor::full(&[1, 1, image_size, image_size], 128.0f32));
    let s = 80.0;
    for _ in 0..warmup {
        m.synthesize(&x, d.as_ref(), s)?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        let out = m.synthesize(&x, d.as_ref(), s)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    Ok(ResourceReport { param_count: param_count(m), latency_ms: median(&mut times), image_size, warmup, runs })
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
