//! Bounded residual correction of degraded depth.
//!
//! `p_raw = clamp(d̃ + s * tanh(U(Δ)), 0, 255)`, with `Δ` decoded from RGB
//! tokens fused with a depth-condition encoding of `d̃`.

use gp_tensor::nn::Conv2d;
use gp_tensor::param::join;
use gp_tensor::{Float, Graph, Module, Param, Var};
use rand::Rng;

use crate::backbone::{ProjectionInit, ResidualDecoder, VitEncoder};
use crate::error::{GpError, Result};
use crate::prompting::{finish_prompt, upsample_antialiased, upsample_factor, PromptAdapter, PromptConfig, PromptModule, PromptVars};

pub const CONDITION_WIDTHS: [usize; 4] = [32, 64, 64, 64];

/// Four 3×3 stride-2 Conv+ReLU layers on depth replicated to three channels
/// and scaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct DepthConditionEncoder<T> {
    pub convs: Vec<Conv2d<T>>,
}

impl<T: Float> DepthConditionEncoder<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut cin = 3;
        let convs = CONDITION_WIDTHS
            .iter()
            .map(|&cout| {
                let c = Conv2d::new(cin, cout, 3, 2, 1, true, rng);
                cin = cout;
                c
            })
            .collect();
        Self { convs }
    }

    pub fn out_channels(&self) -> usize {
        CONDITION_WIDTHS[3]
    }

    /// Raw `[B, 1, H, W]` depth in `[0, 255]` to `[B, 64, H/16, W/16]`.
    pub fn forward(&self, g: &mut Graph<T>, depth: Var) -> Result<Var> {
        let s = g.shape(depth).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] % 16 != 0 || s[3] % 16 != 0 {
            return Err(GpError::Shape(format!("depth condition expects [B, 1, 16k, 16k], got {s:?}")));
        }
        let scaled = g.scale(depth, T::c(1.0 / 255.0));
        let mut x = g.concat(&[scaled, scaled, scaled], 1)?;
        for c in &self.convs {
            x = c.forward(g, x)?;
            x = g.relu(x);
        }
        Ok(x)
    }
}

impl<T: Float> Module<T> for DepthConditionEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("convs.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("convs.{i}")), f);
        }
    }
}

/// Channel concatenation followed by a 1×1 conv back to the token width.
pub fn fuse_features<T: Float>(g: &mut Graph<T>, fusion: &Conv2d<T>, grid: Var, feats: Var) -> Result<Var> {
    let (sg, sf) = (g.shape(grid).to_vec(), g.shape(feats).to_vec());
    if sg.len() != 4 || sf.len() != 4 || sg[0] != sf[0] || sg[2..] != sf[2..] {
        return Err(GpError::Shape(format!("cannot fuse grid {sg:?} with features {sf:?}")));
    }
    let cat = g.concat(&[grid, feats], 1)?;
    Ok(fusion.forward(g, cat)?)
}

/// `clamp(d̃ + s * tanh(Δ_full), 0, 255)`; also returns the unclamped sum.
pub fn apply_correction<T: Float>(g: &mut Graph<T>, depth: Var, delta_full: Var, s: f64) -> Result<(Var, Var)> {
    let t = g.tanh(delta_full);
    let corr = g.scale(t, T::c(s));
    let sum = g.add(depth, corr)?;
    Ok((g.clamp(sum, T::zero(), T::c(255.0)), sum))
}

/// Prompt generator conditioned on RGB and degraded depth.
#[derive(Clone, Debug)]
pub struct GeomPromptRecovery<T> {
    pub cfg: PromptConfig,
    pub encoder: VitEncoder<T>,
    pub depth_encoder: DepthConditionEncoder<T>,
    pub fusion: Conv2d<T>,
    pub decoder: ResidualDecoder<T>,
    pub adapter: PromptAdapter<T>,
}

impl<T: Float> GeomPromptRecovery<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &PromptConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = VitEncoder::new(&cfg.encoder, rng)?;
        let depth_encoder = DepthConditionEncoder::new(rng);
        let c = cfg.encoder.embed_dim;
        let fusion = Conv2d::new(c + depth_encoder.out_channels(), c, 1, 1, 0, true, rng);
        let decoder = ResidualDecoder::new(c, cfg.decoder_width, ProjectionInit::Zero, rng);
        let adapter = PromptAdapter::new(cfg.adapter_hidden, rng);
        Ok(Self { cfg: cfg.clone(), encoder, depth_encoder, fusion, decoder, adapter })
    }
}

impl<T: Float> PromptModule<T> for GeomPromptRecovery<T> {
    fn config(&self) -> &PromptConfig {
        &self.cfg
    }

    fn forward(&self, g: &mut Graph<T>, x: Var, depth: Option<Var>, s: f64, train: bool) -> Result<PromptVars> {
        let depth = depth.ok_or_else(|| GpError::InvalidArgument("recovery needs a depth input".into()))?;
        let (sx, sd) = (g.shape(x).to_vec(), g.shape(depth).to_vec());
        if sd.len() != 4 || sd[1] != 1 || sx.len() != 4 || sd[0] != sx[0] || sd[2..] != sx[2..] {
            return Err(GpError::Shape(format!("RGB {sx:?} and depth {sd:?} are not aligned")));
        }
        let grid = self.encoder.forward(g, x)?;
        let feats = self.depth_encoder.forward(g, depth)?;
        let fused = fuse_features(g, &self.fusion, grid, feats)?;
        let delta = self.decoder.forward(g, fused, train)?;
        let full = upsample_antialiased(g, delta, upsample_factor(&self.cfg.encoder)?)?;
        let (p_raw, p_raw_unclamped) = apply_correction(g, depth, full, s)?;
        let p_star = finish_prompt(g, p_raw, &self.cfg, &self.adapter)?;
        Ok(PromptVars { delta, p_raw, p_raw_unclamped, p_star })
    }

    fn needs_depth(&self) -> bool {
        true
    }

    fn encoder_mut(&mut self) -> &mut VitEncoder<T> {
        &mut self.encoder
    }
}

impl<T: Float> Module<T> for GeomPromptRecovery<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.depth_encoder.visit(&join(prefix, "depth_encoder"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.adapter.visit(&join(prefix, "adapter"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.depth_encoder.visit_mut(&join(prefix, "depth_encoder"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.adapter.visit_mut(&join(prefix, "adapter"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gp_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn condition_encoder_shapes_and_zero_input() {
        let enc = DepthConditionEncoder::<f32>::new(&mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let d = g.constant(Tensor::zeros(&[1, 1, 64, 64]));
        let f = enc.forward(&mut g, d).unwrap();
        assert_eq!(g.shape(f), &[1, 64, 4, 4]);
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
        let d = g.constant(Tensor::zeros(&[1, 1, 480, 480]));
        let f = enc.forward(&mut g, d).unwrap();
        assert_eq!(g.shape(f), &[1, 64, 30, 30]);
    }

    #[test]
    fn selecting_fusion_returns_grid() {
        let c = 64;
        let w = Tensor::from_fn(&[c, 2 * c, 1, 1], |i| if i / (2 * c) == i % (2 * c) { 1.0 } else { 0.0 });
        let fusion = Conv2d::<f64>::with_weight(w, true, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let grid = g.constant(gp_tensor::nn::normal(&[2, c, 4, 4], 1.0, &mut rng));
        let feats = g.constant(gp_tensor::nn::normal(&[2, c, 4, 4], 1.0, &mut rng));
        let out = fuse_features(&mut g, &fusion, grid, feats).unwrap();
        assert_eq!(g.value(out).data(), g.value(grid).data());
        let bad = g.constant(Tensor::zeros(&[2, c, 3, 4]));
        assert!(fuse_features(&mut g, &fusion, grid, bad).is_err());
    }

    #[test]
    fn correction_examples() {
        let run = |d: f64, delta: f64, s: f64| {
            let mut g = Graph::<f64>::new();
            let dv = g.constant(Tensor::full(&[1, 1, 1, 1], d));
            let xv = g.constant(Tensor::full(&[1, 1, 1, 1], delta));
            let (p, _) = apply_correction(&mut g, dv, xv, s).unwrap();
            g.value(p).data()[0]
        };
        assert_eq!(run(37.0, 0.0, 80.0), 37.0);
        assert_eq!(run(250.0, 50.0, 20.0), 255.0);
        assert!((run(100.0, 0.25f64.atanh(), 80.0) - 120.0).abs() < 1e-9);
    }

    #[test]
    fn identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = GeomPromptRecovery::<f32>::new(&PromptConfig::desk(), &mut rng).unwrap();
        let x = gp_tensor::nn::normal(&[2, 3, 64, 64], 1.0, &mut rng);
        let d = Tensor::from_fn(&[2, 1, 64, 64], |i| (i * 31 % 256) as f32);
        let p = m.synthesize(&x, Some(&d), 80.0).unwrap();
        assert_eq!(p.p_raw.data(), d.data());
        assert_eq!(p.p_star.shape(), &[2, 3, 64, 64]);
        assert!(m.synthesize(&x, None, 80.0).is_err());
    }
}
