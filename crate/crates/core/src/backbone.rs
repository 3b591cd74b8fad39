//! RGB patch-transformer encoder and the CNN decoder that turns its token
//! grid into a low-resolution residual.
//!
//! Token grids are carried channel-first, `[B, C, H/p, W/p]`, so the decoder
//! can consume them directly as feature maps.

use gp_tensor::nn::{normal, trunc_normal, BatchNorm2d, Conv2d, LayerNorm, Linear};
use gp_tensor::ops::bilinear_matrix;
use gp_tensor::param::join;
use gp_tensor::{Float, Graph, Module, Param, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Training crop; fixes the size of the learned positional table.
    pub image_size: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self { patch_size: 16, embed_dim: 64, depth: 4, heads: 4, image_size: 64, mlp_ratio: 4 }
    }

    /// ViT-S/16 at the paper's crop size.
    pub fn paper() -> Self {
        Self { patch_size: 16, embed_dim: 384, depth: 12, heads: 6, image_size: 480, mlp_ratio: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GpError::Config(m));
        if self.patch_size == 0 || self.embed_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("encoder sizes must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }
}

#[derive(Clone, Debug)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    heads: usize,
}

impl<T: Float> Block<T> {
    fn new<R: Rng + ?Sized>(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(dim, mlp_ratio * dim, rng),
            fc2: Linear::new(mlp_ratio * dim, dim, rng),
            heads,
        }
    }

    /// Pre-norm transformer block on `[B, N, C]` tokens.
    fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, n, c) = (s[0], s[1], s[2]);
        let (h, d) = (self.heads, c / self.heads);
        let y = self.norm1.forward(g, x)?;
        let qkv = self.qkv.forward(g, y)?;
        let qkv = g.reshape(qkv, &[b, n, 3, h, d])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = g.reshape(qkv, &[3, b * h, n, d])?;
        let take = |g: &mut Graph<T>, i| -> Result<Var> {
            let t = g.narrow(qkv, 0, i, 1)?;
            Ok(g.reshape(t, &[b * h, n, d])?)
        };
        let (q, k, v) = (take(g, 0)?, take(g, 1)?, take(g, 2)?);
        let scores = g.bmm(q, k, false, true)?;
        let scores = g.scale(scores, T::c(1.0 / (d as f64).sqrt()));
        let attn = g.softmax_last(scores)?;
        let out = g.bmm(attn, v, false, false)?;
        let out = g.reshape(out, &[b, h, n, d])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[b, n, c])?;
        let out = self.proj.forward(g, out)?;
        let x = g.add(x, out)?;
        let y = self.norm2.forward(g, x)?;
        let y = self.fc1.forward(g, y)?;
        let y = g.gelu(y);
        let y = self.fc2.forward(g, y)?;
        Ok(g.add(x, y)?)
    }
}

impl<T: Float> Module<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.qkv.visit(&join(prefix, "attn.qkv"), f);
        self.proj.visit(&join(prefix, "attn.proj"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.qkv.visit_mut(&join(prefix, "attn.qkv"), f);
        self.proj.visit_mut(&join(prefix, "attn.proj"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
    }
}

/// ViT encoder with one class token that is dropped from the output.
#[derive(Clone, Debug)]
pub struct VitEncoder<T> {
    pub cfg: EncoderConfig,
    pub patch_embed: Conv2d<T>,
    pub cls_token: Param<T>,
    /// `[1 + G*G, C]`: class-token row followed by the row-major grid.
    pub pos_embed: Param<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
}

impl<T: Float> VitEncoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (p, c, g) = (cfg.patch_size, cfg.embed_dim, cfg.grid());
        let fan_in = 3 * p * p;
        let patch_embed = Conv2d::with_weight(normal(&[c, 3, p, p], (1.0 / fan_in as f64).sqrt(), rng), true, p, 0);
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            cls_token: Param::weight(trunc_normal(&[1, 1, c], 0.02, rng)),
            pos_embed: Param::weight(trunc_normal(&[1 + g * g, c], 0.02, rng)),
            blocks: (0..cfg.depth).map(|_| Block::new(c, cfg.heads, cfg.mlp_ratio, rng)).collect(),
            norm: LayerNorm::new(c),
        })
    }

    /// Positional table for a `gh x gw` grid: the learned table when the grid
    /// matches training, otherwise its bilinear resize (class row unchanged).
    pub fn positional(&self, g: &mut Graph<T>, gh: usize, gw: usize) -> Result<Var> {
        let pos = g.param(&self.pos_embed);
        let (c, n) = (self.cfg.embed_dim, self.cfg.grid());
        if (gh, gw) == (n, n) {
            return Ok(pos);
        }
        let cls = g.narrow(pos, 0, 0, 1)?;
        let grid = g.narrow(pos, 0, 1, n * n)?;
        let grid = g.permute(grid, &[1, 0])?;
        let grid = g.reshape(grid, &[1, c, n, n])?;
        let grid = g.spatial_linear(grid, &bilinear_matrix(n, gh), &bilinear_matrix(n, gw))?;
        let grid = g.reshape(grid, &[c, gh * gw])?;
        let grid = g.permute(grid, &[1, 0])?;
        Ok(g.concat(&[cls, grid], 0)?)
    }

    /// `[B, 3, H, W]` normalized RGB to a `[B, C, H/p, W/p]` token grid.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let p = self.cfg.patch_size;
        if s.len() != 4 || s[1] != 3 {
            return Err(GpError::Shape(format!("encoder expects [B, 3, H, W], got {s:?}")));
        }
        if s[2] % p != 0 || s[3] % p != 0 {
            return Err(GpError::Shape(format!("image {}x{} not divisible by patch size {p}", s[2], s[3])));
        }
        let (b, c, gh, gw) = (s[0], self.cfg.embed_dim, s[2] / p, s[3] / p);
        let t = gh * gw;
        let tokens = self.patch_embed.forward(g, x)?;
        let tokens = g.reshape(tokens, &[b, c, t])?;
        let tokens = g.permute(tokens, &[0, 2, 1])?;
        let cls = g.param(&self.cls_token);
        let cls = g.repeat_leading(cls, b)?;
        let mut h = g.concat(&[cls, tokens], 1)?;
        let pos = self.positional(g, gh, gw)?;
        h = g.add_broadcast(h, pos)?;
        for blk in &self.blocks {
            h = blk.forward(g, h)?;
        }
        h = self.norm.forward(g, h)?;
        let patches = g.narrow(h, 1, 1, t)?;
        let patches = g.permute(patches, &[0, 2, 1])?;
        Ok(g.reshape(patches, &[b, c, gh, gw])?)
    }
}

impl<T: Float> Module<T> for VitEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "cls_token"), &self.cls_token);
        f(&join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "cls_token"), &mut self.cls_token);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// How the decoder's final 1×1 projection starts out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProjectionInit {
    /// Normal weights with the given std, zero bias.
    Small(f64),
    /// All zeros, so the residual starts at exactly zero.
    Zero,
}

/// ×2 bilinear, two 3×3 Conv-BN-ReLU blocks, 1×1 projection to one channel.
#[derive(Clone, Debug)]
pub struct ResidualDecoder<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub proj: Conv2d<T>,
}

impl<T: Float> ResidualDecoder<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, width: usize, init: ProjectionInit, rng: &mut R) -> Self {
        let proj_w = match init {
            ProjectionInit::Small(std) => normal(&[1, width, 1, 1], std, rng),
            ProjectionInit::Zero => Tensor::zeros(&[1, width, 1, 1]),
        };
        Self {
            conv1: Conv2d::new(in_dim, width, 3, 1, 1, false, rng),
            bn1: BatchNorm2d::new(width),
            conv2: Conv2d::new(width, width, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(width),
            proj: Conv2d::with_weight(proj_w, true, 1, 0),
        }
    }

    /// `[B, C, h, w]` grid to a `[B, 1, 2h, 2w]` residual.
    pub fn forward(&self, g: &mut Graph<T>, grid: Var, train: bool) -> Result<Var> {
        let s = g.shape(grid).to_vec();
        if s.len() != 4 || s[1] != self.conv1.in_channels() {
            return Err(GpError::Shape(format!("decoder expects [B, {}, h, w], got {s:?}", self.conv1.in_channels())));
        }
        let x = g.spatial_linear(grid, &bilinear_matrix(s[2], 2 * s[2]), &bilinear_matrix(s[3], 2 * s[3]))?;
        let x = self.conv1.forward(g, x)?;
        let x = self.bn1.forward(g, x, train)?;
        let x = g.relu(x);
        let x = self.conv2.forward(g, x)?;
        let x = self.bn2.forward(g, x, train)?;
        let x = g.relu(x);
        Ok(self.proj.forward(g, x)?)
    }
}

impl<T: Float> Module<T> for ResidualDecoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gp_tensor::param::param_count;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn token_grid_shapes() {
        let enc = VitEncoder::<f32>::new(&EncoderConfig::desk(), &mut rng()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 64, 64]));
        let t = enc.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(t), &[2, 64, 4, 4]);
        let x = g.constant(Tensor::zeros(&[1, 3, 48, 80]));
        let t = enc.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(t), &[1, 64, 3, 5]);
    }

    #[test]
    fn indivisible_input_is_shape_error() {
        let enc = VitEncoder::<f32>::new(&EncoderConfig::desk(), &mut rng()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 60, 64]));
        assert!(matches!(enc.forward(&mut g, x), Err(GpError::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::desk();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::desk();
        c.image_size = 70;
        assert!(c.validate().is_err());
        assert!(EncoderConfig::paper().validate().is_ok());
        assert_eq!(EncoderConfig::paper().grid(), 30);
    }

    #[test]
    fn positional_resize_matches_direct_bilinear() {
        let enc = VitEncoder::<f64>::new(&EncoderConfig::desk(), &mut rng()).unwrap();
        let mut g = Graph::new();
        let pos = enc.positional(&mut g, 6, 6).unwrap();
        let got = g.value(pos).clone();
        assert_eq!(got.shape(), &[37, 64]);
        let table = enc.pos_embed.value.data();
        let c = 64;
        let sample = |i: usize| {
            let s = ((i as f64 + 0.5) * 4.0 / 6.0 - 0.5).clamp(0.0, 3.0);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(3), s - i0 as f64)
        };
        for ch in 0..c {
            assert_eq!(got.data()[ch], table[ch]);
        }
        for y in 0..6 {
            for x in 0..6 {
                let (y0, y1, fy) = sample(y);
                let (x0, x1, fx) = sample(x);
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| table[(1 + yy * 4 + xx) * c + ch];
                    let want = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                    let v = got.data()[(1 + y * 6 + x) * c + ch];
                    assert!((v - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn decoder_shapes_and_zero_grid() {
        let dec = ResidualDecoder::<f32>::new(64, 64, ProjectionInit::Zero, &mut rng());
        let mut g = Graph::new();
        let grid = g.constant(Tensor::zeros(&[1, 64, 4, 4]));
        let r = dec.forward(&mut g, grid, false).unwrap();
        assert_eq!(g.shape(r), &[1, 1, 8, 8]);
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
        let dec = ResidualDecoder::<f32>::new(64, 64, ProjectionInit::Small(1e-3), &mut rng());
        let grid = g.constant(Tensor::zeros(&[1, 64, 30, 30]));
        let r = dec.forward(&mut g, grid, false).unwrap();
        assert_eq!(g.shape(r), &[1, 1, 60, 60]);
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_counts_match_layer_formula() {
        let cfg = EncoderConfig::desk();
        let enc = VitEncoder::<f32>::new(&cfg, &mut rng()).unwrap();
        let (c, p, m) = (cfg.embed_dim, cfg.patch_size, cfg.mlp_ratio);
        let block = 2 * c + (3 * c * c + 3 * c) + (c * c + c) + 2 * c + (m * c * c + m * c) + (m * c * c + c);
        let want = (3 * p * p * c + c) + c + (1 + cfg.grid().pow(2)) * c + cfg.depth * block + 2 * c;
        assert_eq!(param_count(&enc), want);
        let dec = ResidualDecoder::<f32>::new(64, 64, ProjectionInit::Zero, &mut rng());
        assert_eq!(param_count(&dec), 64 * 64 * 9 + 2 * 64 + 64 * 64 * 9 + 2 * 64 + 64 + 1);
    }
}
