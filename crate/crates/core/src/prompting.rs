//! RGB-only geometric prompt synthesis.
//!
//! `p_raw = gray + s * tanh(U(Δ))` and `p* = Π(A(N(p_raw)))`, where `U` is a
//! fixed anti-aliased upsampler, `N` replicates to three channels and
//! normalizes, `A` is the zero-initialized adapter and `Π` a hard low-pass.

use gp_tensor::nn::Conv2d;
use gp_tensor::ops::{avg_pool_matrix, bilinear_matrix};
use gp_tensor::param::join;
use gp_tensor::{Float, Graph, Module, Param, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{EncoderConfig, ProjectionInit, ResidualDecoder, VitEncoder};
use crate::error::{GpError, Result};
use crate::image::DepthMap;

/// Value-space constants of the prompt parameterization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptParams {
    pub gray_prior: f64,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

impl Default for PromptParams {
    fn default() -> Self {
        Self { gray_prior: 127.5, norm_mean: [0.48; 3], norm_std: [0.28; 3] }
    }
}

impl PromptParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=255.0).contains(&self.gray_prior) {
            return Err(GpError::Config(format!("gray_prior {} outside [0, 255]", self.gray_prior)));
        }
        if self.norm_std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(GpError::Config("norm_std must be strictly positive".into()));
        }
        Ok(())
    }
}

/// Architecture of a prompt module (shared by both variants).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub encoder: EncoderConfig,
    pub decoder_width: usize,
    pub adapter_hidden: usize,
    /// Std of the decoder's final projection weights (GeomPrompt only).
    pub projection_init_std: f64,
    pub use_adapter: bool,
    pub use_lowpass: bool,
    pub params: PromptParams,
}

impl PromptConfig {
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            decoder_width: 64,
            adapter_hidden: 16,
            projection_init_std: 1e-3,
            use_adapter: true,
            use_lowpass: true,
            params: PromptParams::default(),
        }
    }

    pub fn paper() -> Self {
        Self { encoder: EncoderConfig::paper(), ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.params.validate()?;
        upsample_factor(&self.encoder).map(|_| ())
    }
}

/// Residual-to-image factor: the decoder works at twice the token resolution.
pub fn upsample_factor(enc: &EncoderConfig) -> Result<usize> {
    let f = enc.patch_size / 2;
    if enc.patch_size % 2 != 0 || !matches!(f, 2 | 4 | 8) {
        return Err(GpError::Config(format!("patch size {} gives unsupported upsampling factor", enc.patch_size)));
    }
    Ok(f)
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                for j in 0..n {
                    out[i * n + j] += av * b[p * n + j];
                }
            }
        }
    }
    out
}

/// `[1, 2, 1] / 4` smoothing with reflect padding, as an `n x n` matrix.
pub fn binomial_blur_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] += 0.5;
        if n == 1 {
            m[0] += 0.5;
            continue;
        }
        let lo = if i == 0 { 1 } else { i - 1 };
        let hi = if i + 1 == n { n - 2 } else { i + 1 };
        m[i * n + lo] += 0.25;
        m[i * n + hi] += 0.25;
    }
    m
}

/// One-axis matrix of the anti-aliased upsampler: `factor.log2()` stages of
/// bilinear ×2 followed by binomial smoothing. Shape `[n * factor, n]`.
pub fn antialiased_upsample_matrix<T: Float>(n: usize, factor: usize) -> Result<Tensor<T>> {
    if !matches!(factor, 2 | 4 | 8) {
        return Err(GpError::InvalidArgument(format!("upsampling factor {factor} not in {{2, 4, 8}}")));
    }
    let mut m: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
    let mut len = n;
    let mut f = factor;
    while f > 1 {
        let up = bilinear_matrix::<f64>(len, 2 * len);
        let stage = matmul(&binomial_blur_matrix(2 * len), up.data(), 2 * len, 2 * len, len);
        m = matmul(&stage, &m, 2 * len, len, n);
        len *= 2;
        f /= 2;
    }
    Ok(Tensor::new(&[len, n], m.into_iter().map(T::c).collect())?)
}

/// Anti-aliased upsampling of a `[B, C, h, w]` map by `factor`.
pub fn upsample_antialiased<T: Float>(g: &mut Graph<T>, delta: Var, factor: usize) -> Result<Var> {
    let s = g.shape(delta).to_vec();
    if s.len() != 4 {
        return Err(GpError::Shape(format!("expected [B, C, h, w], got {s:?}")));
    }
    let rows = antialiased_upsample_matrix(s[2], factor)?;
    let cols = antialiased_upsample_matrix(s[3], factor)?;
    Ok(g.spatial_linear(delta, &rows, &cols)?)
}

/// `gray + s * tanh(Δ_full)`.
pub fn bound_residual<T: Float>(g: &mut Graph<T>, delta_full: Var, params: &PromptParams, s: f64) -> Var {
    let t = g.tanh(delta_full);
    g.affine(t, T::c(s), T::c(params.gray_prior))
}

/// `[B, 1, H, W]` raw prompt to `[B, 3, H, W]` with `(p/255 - μ_c)/σ_c`.
pub fn replicate_and_normalize<T: Float>(g: &mut Graph<T>, p_raw: Var, params: &PromptParams) -> Result<Var> {
    let s = g.shape(p_raw).to_vec();
    if s.len() != 4 || s[1] != 1 {
        return Err(GpError::Shape(format!("expected [B, 1, H, W], got {s:?}")));
    }
    let chans: Vec<Var> = (0..3)
        .map(|c| {
            let (m, sd) = (params.norm_mean[c], params.norm_std[c]);
            g.affine(p_raw, T::c(1.0 / (255.0 * sd)), T::c(-m / sd))
        })
        .collect();
    Ok(g.concat(&chans, 1)?)
}

/// 2×2 average pooling followed by bilinear ×2, on `[B, C, H, W]`.
pub fn low_pass_project<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(GpError::Shape(format!("low-pass needs [B, C, even H, even W], got {s:?}")));
    }
    let axis = |n: usize| -> Tensor<T> {
        let pool = avg_pool_matrix::<f64>(n, 2);
        let up = bilinear_matrix::<f64>(n / 2, n);
        let m = matmul(up.data(), pool.data(), n, n / 2, n);
        Tensor::new(&[n, n], m.into_iter().map(T::c).collect()).expect("square")
    };
    Ok(g.spatial_linear(x, &axis(s[2]), &axis(s[3]))?)
}

/// Residual refiner in normalized prompt space; the identity at init.
#[derive(Clone, Debug)]
pub struct PromptAdapter<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub conv3: Conv2d<T>,
}

impl<T: Float> PromptAdapter<T> {
    pub fn new<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(3, hidden, 1, 1, 0, true, rng),
            conv2: Conv2d::new(hidden, hidden, 3, 1, 1, true, rng),
            conv3: Conv2d::with_weight(Tensor::zeros(&[3, hidden, 1, 1]), true, 1, 0),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let h = g.relu(h);
        let h = self.conv3.forward(g, h)?;
        Ok(g.add(x, h)?)
    }
}

impl<T: Float> Module<T> for PromptAdapter<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
    }
}

/// Graph handles produced by one prompt forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    /// Low-resolution residual `[B, 1, H/8, W/8]`.
    pub delta: Var,
    /// Value-space prompt `[B, 1, H, W]`.
    pub p_raw: Var,
    /// Unclamped `d + corr` for the recovery variant; equals `p_raw` otherwise.
    pub p_raw_unclamped: Var,
    /// Segmenter-ready prompt `[B, 3, H, W]`.
    pub p_star: Var,
}

/// Materialized prompt for one batch.
#[derive(Clone, Debug)]
pub struct GeometricPrompt<T> {
    pub p_raw: Tensor<T>,
    pub p_star: Tensor<T>,
}

impl<T: Float> GeometricPrompt<T> {
    /// Rounded `p_raw` of batch item `n` as an 8-bit map.
    pub fn export(&self, n: usize) -> Result<DepthMap> {
        let item = self.p_raw.batch_item(n);
        let (h, w) = (item.dim(2), item.dim(3));
        let vals: Vec<f32> = item.data().iter().map(|v| v.f64() as f32).collect();
        DepthMap::from_f32(w, h, &vals)
    }
}

/// Shared tail of both variants: `N`, optional `A`, optional `Π`.
pub(crate) fn finish_prompt<T: Float>(
    g: &mut Graph<T>,
    p_raw: Var,
    cfg: &PromptConfig,
    adapter: &PromptAdapter<T>,
) -> Result<Var> {
    let mut p = replicate_and_normalize(g, p_raw, &cfg.params)?;
    if cfg.use_adapter {
        p = adapter.forward(g, p)?;
    }
    if cfg.use_lowpass {
        p = low_pass_project(g, p)?;
    }
    Ok(p)
}

/// Which parameter group a named parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("encoder.") {
        ParamGroup::Encoder
    } else {
        ParamGroup::Decoder
    }
}

/// Common interface of the two prompt-module variants.
pub trait PromptModule<T: Float>: Module<T> + Send + Sync {
    fn config(&self) -> &PromptConfig;

    /// `x`: normalized RGB `[B, 3, H, W]`. `depth`: raw degraded depth
    /// `[B, 1, H, W]`, required by the recovery variant and ignored otherwise.
    fn forward(&self, g: &mut Graph<T>, x: Var, depth: Option<Var>, s: f64, train: bool) -> Result<PromptVars>;

    fn needs_depth(&self) -> bool;

    fn encoder_mut(&mut self) -> &mut VitEncoder<T>;

    /// Eval-mode prompt for a batch.
    fn synthesize(&self, x: &Tensor<T>, depth: Option<&Tensor<T>>, s: f64) -> Result<GeometricPrompt<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let dv = depth.map(|d| g.constant(d.clone()));
        let out = self.forward(&mut g, xv, dv, s, false)?;
        Ok(GeometricPrompt { p_raw: g.value(out.p_raw).clone(), p_star: g.value(out.p_star).clone() })
    }
}

/// RGB-only prompt generator.
#[derive(Clone, Debug)]
pub struct GeomPrompt<T> {
    pub cfg: PromptConfig,
    pub encoder: VitEncoder<T>,
    pub decoder: ResidualDecoder<T>,
    pub adapter: PromptAdapter<T>,
}

impl<T: Float> GeomPrompt<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &PromptConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = VitEncoder::new(&cfg.encoder, rng)?;
        let decoder = ResidualDecoder::new(cfg.encoder.embed_dim, cfg.decoder_width, ProjectionInit::Small(cfg.projection_init_std), rng);
        let adapter = PromptAdapter::new(cfg.adapter_hidden, rng);
        Ok(Self { cfg: cfg.clone(), encoder, decoder, adapter })
    }
}

impl<T: Float> PromptModule<T> for GeomPrompt<T> {
    fn config(&self) -> &PromptConfig {
        &self.cfg
    }

    fn forward(&self, g: &mut Graph<T>, x: Var, _depth: Option<Var>, s: f64, train: bool) -> Result<PromptVars> {
        let grid = self.encoder.forward(g, x)?;
        let delta = self.decoder.forward(g, grid, train)?;
        let full = upsample_antialiased(g, delta, upsample_factor(&self.cfg.encoder)?)?;
        let p_raw = bound_residual(g, full, &self.cfg.params, s);
        let p_star = finish_prompt(g, p_raw, &self.cfg, &self.adapter)?;
        Ok(PromptVars { delta, p_raw, p_raw_unclamped: p_raw, p_star })
    }

    fn needs_depth(&self) -> bool {
        false
    }

    fn encoder_mut(&mut self) -> &mut VitEncoder<T> {
        &mut self.encoder
    }
}

impl<T: Float> Module<T> for GeomPrompt<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.adapter.visit(&join(prefix, "adapter"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.adapter.visit_mut(&join(prefix, "adapter"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval1(x: Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> Tensor<f64> {
        let mut g = Graph::new();
        let v = g.constant(x);
        let out = f(&mut g, v).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn upsampler_preserves_constants() {
        for factor in [2, 4, 8] {
            let out = eval1(Tensor::full(&[1, 1, 5, 3], 2.5), |g, v| upsample_antialiased(g, v, factor));
            assert_eq!(out.shape(), &[1, 1, 5 * factor, 3 * factor]);
            assert!(out.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        }
        assert!(antialiased_upsample_matrix::<f64>(4, 3).is_err());
    }

    #[test]
    fn upsampler_impulse_matches_brute_force() {
        let n = 9;
        let mut x = Tensor::zeros(&[1, 1, n, n]);
        x.data_mut()[4 * n + 4] = 1.0;
        let out = eval1(x.clone(), |g, v| upsample_antialiased(g, v, 2));
        // Oracle: direct per-pixel bilinear sampling, then direct 3×3 reflect blur.
        let m = 2 * n;
        let sample = |i: usize| {
            let s = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(n - 1), s - i0 as f64)
        };
        let mut up = vec![0.0; m * m];
        for y in 0..m {
            for xx in 0..m {
                let (y0, y1, fy) = sample(y);
                let (x0, x1, fx) = sample(xx);
                let at = |a: usize, b: usize| x.data()[a * n + b];
                up[y * m + xx] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
            }
        }
        let refl = |i: isize| -> usize { if i < 0 { 1 } else if i as usize >= m { m - 2 } else { i as usize } };
        let k = [0.25, 0.5, 0.25];
        let mut sum = 0.0;
        for y in 0..m {
            for xx in 0..m {
                let mut acc = 0.0;
                for (dy, ky) in k.iter().enumerate() {
                    for (dx, kx) in k.iter().enumerate() {
                        acc += ky * kx * up[refl(y as isize + dy as isize - 1) * m + refl(xx as isize + dx as isize - 1)];
                    }
                }
                let got = out.data()[y * m + xx];
                assert!((got - acc).abs() < 1e-12);
                assert!(got >= 0.0);
                sum += got;
            }
        }
        assert!((sum - 4.0).abs() < 1e-12);
    }

    #[test]
    fn bound_residual_examples() {
        let p = PromptParams::default();
        let run = |d: f64, s: f64| eval1(Tensor::full(&[1, 1, 1, 1], d), |g, v| Ok(bound_residual(g, v, &p, s))).data()[0];
        assert_eq!(run(0.0, 80.0), 127.5);
        assert!((run(50.0, 80.0) - 207.5).abs() < 1e-9);
        assert!((run(0.5f64.atanh(), 80.0) - 167.5).abs() < 1e-9);
    }

    #[test]
    fn normalize_examples() {
        let p = PromptParams::default();
        for (v, want) in [(122.4, 0.0), (127.5, 0.02 / 0.28), (255.0, 0.52 / 0.28)] {
            let out = eval1(Tensor::full(&[1, 1, 2, 2], v), |g, x| replicate_and_normalize(g, x, &p));
            assert_eq!(out.shape(), &[1, 3, 2, 2]);
            assert!(out.data().iter().all(|&o| (o - want).abs() < 1e-9));
        }
        assert!((0.02f64 / 0.28 - 0.071429).abs() < 1e-6 && (0.52f64 / 0.28 - 1.857143).abs() < 1e-6);
    }

    #[test]
    fn low_pass_examples() {
        let out = eval1(Tensor::full(&[1, 3, 8, 8], 4.0), low_pass_project);
        assert!(out.data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
        let checker = Tensor::from_fn(&[1, 1, 8, 8], |i| if (i / 8 + i % 8) % 2 == 0 { 0.0 } else { 255.0 });
        let out = eval1(checker, low_pass_project);
        assert!(out.data().iter().all(|&v| (v - 127.5).abs() < 1e-9));
        let mut g = Graph::<f64>::new();
        let odd = g.constant(Tensor::zeros(&[1, 3, 7, 8]));
        assert!(low_pass_project(&mut g, odd).is_err());
    }

    #[test]
    fn adapter_zero_input_equals_bias_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = PromptAdapter::<f64>::new(4, &mut rng);
        a.conv2.bias.as_mut().unwrap().value = Tensor::from_fn(&[4], |i| 0.1 * i as f64 - 0.1);
        a.conv3.weight.value = Tensor::from_fn(&[3, 4, 1, 1], |i| 0.01 * (i as f64 + 1.0));
        a.conv3.bias.as_mut().unwrap().value = Tensor::new(&[3], vec![0.5, -0.5, 0.25]).unwrap();
        let out = eval1(Tensor::zeros(&[1, 3, 5, 5]), |g, x| a.forward(g, x));
        // conv1 output is zero (zero bias), so conv2 yields relu(bias2) everywhere.
        let h: Vec<f64> = (0..4).map(|i| (0.1 * i as f64 - 0.1f64).max(0.0)).collect();
        for c in 0..3 {
            let want: f64 = (0..4).map(|j| 0.01 * (c * 4 + j + 1) as f64 * h[j]).sum::<f64>() + [0.5, -0.5, 0.25][c];
            assert!(out.data()[c * 25..(c + 1) * 25].iter().all(|&v| (v - want).abs() < 1e-12));
        }
    }

    #[test]
    fn untrained_prompt_stays_near_gray() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = GeomPrompt::<f32>::new(&PromptConfig::desk(), &mut rng).unwrap();
        let x = gp_tensor::nn::normal(&[2, 3, 64, 64], 1.0, &mut rng);
        let s = 80.0;
        let p = m.synthesize(&x, None, s).unwrap();
        assert_eq!(p.p_star.shape(), &[2, 3, 64, 64]);
        assert!(p.p_raw.data().iter().all(|&v| (v as f64 - 127.5).abs() < 0.05 * s));
        assert_eq!(p.export(1).unwrap().width(), 64);
    }

    #[test]
    fn groups_by_name() {
        assert_eq!(param_group("encoder.blocks.0.attn.qkv.weight"), ParamGroup::Encoder);
        assert_eq!(param_group("adapter.conv1.weight"), ParamGroup::Decoder);
        assert_eq!(param_group("decoder.proj.bias"), ParamGroup::Decoder);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn linearity(
            a in -3.0f64..3.0, b in -3.0f64..3.0,
            xs in proptest::collection::vec(-5.0f64..5.0, 2 * 16),
            ys in proptest::collection::vec(-5.0f64..5.0, 2 * 16),
        ) {
            let x = Tensor::new(&[1, 2, 4, 4], xs).unwrap();
            let y = Tensor::new(&[1, 2, 4, 4], ys).unwrap();
            let mix = x.zip_map(&y, |p, q| a * p + b * q);
            type Op = fn(&mut Graph<f64>, Var) -> Result<Var>;
            let ops: [Op; 2] = [|g, v| upsample_antialiased(g, v, 4), low_pass_project];
            for op in ops {
                let lhs = eval1(mix.clone(), op);
                let rhs = eval1(x.clone(), op).zip_map(&eval1(y.clone(), op), |p, q| a * p + b * q);
                for (l, r) in lhs.data().iter().zip(rhs.data()) {
                    prop_assert!((l - r).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn zero_init_adapter_is_bitwise_identity(xs in proptest::collection::vec(-1e3f32..1e3, 3 * 36), seed in any::<u64>()) {
            let a = PromptAdapter::<f32>::new(16, &mut ChaCha8Rng::seed_from_u64(seed));
            let x = Tensor::new(&[1, 3, 6, 6], xs).unwrap();
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let out = a.forward(&mut g, v).unwrap();
            prop_assert!(g.value(out).data().iter().zip(x.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
