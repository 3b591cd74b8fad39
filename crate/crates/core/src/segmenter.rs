//! Frozen RGB-D segmenter contract and the toy segmenter that fills it.

use gp_tensor::nn::{BatchNorm2d, Conv2d};
use gp_tensor::ops::bilinear_matrix;
use gp_tensor::param::{join, set_requires_grad, snapshot_bits};
use gp_tensor::{Float, Graph, Module, Param, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::image::{DepthMap, RgbImage};
use crate::prompting::PromptParams;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// How the geometric input enters the segmenter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    ThreeChannel,
    /// Channel mean, for segmenters with a single depth channel.
    OneChannelReduce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    pub num_classes: usize,
    pub channel_mode: ChannelMode,
    pub encoder_widths: [usize; 4],
    pub decoder_widths: [usize; 3],
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self { num_classes: 5, channel_mode: ChannelMode::ThreeChannel, encoder_widths: [32, 64, 96, 128], decoder_widths: [64, 48, 32] }
    }
}

/// Normalized RGB `[3, H, W]` with ImageNet statistics.
pub fn normalize_rgb<T: Float>(x: &RgbImage) -> Tensor<T> {
    let (w, h) = (x.width(), x.height());
    let hw = w * h;
    let mut out = vec![T::zero(); 3 * hw];
    for (i, p) in x.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * hw + i] = T::c((p[c] as f64 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
        }
    }
    Tensor::new(&[3, h, w], out).expect("sized")
}

/// Depth replicated to `[3, H, W]` and normalized with the prompt statistics.
/// The same transform serves GT depth, degraded depth, baselines and
/// exported prompts.
pub fn normalize_depth_input<T: Float>(d: &DepthMap, params: &PromptParams) -> Tensor<T> {
    let hw = d.width() * d.height();
    let mut out = vec![T::zero(); 3 * hw];
    for c in 0..3 {
        let (m, s) = (params.norm_mean[c], params.norm_std[c]);
        for (o, &v) in out[c * hw..(c + 1) * hw].iter_mut().zip(d.data()) {
            *o = T::c((v as f64 / 255.0 - m) / s);
        }
    }
    Tensor::new(&[3, d.height(), d.width()], out).expect("sized")
}

/// Raw depth values as a `[1, H, W]` tensor.
pub fn depth_tensor<T: Float>(d: &DepthMap) -> Tensor<T> {
    Tensor::new(&[1, d.height(), d.width()], d.data().iter().map(|&v| T::c(v as f64)).collect()).expect("sized")
}

#[derive(Clone, Debug)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Float> ConvBnRelu<T> {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        Self { conv: Conv2d::new(cin, cout, k, stride, k / 2, false, rng), bn: BatchNorm2d::new(cout) }
    }

    fn forward(&self, g: &mut Graph<T>, x: Var, train: bool) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y, train)?;
        Ok(g.relu(y))
    }
}

impl<T: Float> Module<T> for ConvBnRelu<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

fn up2<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    Ok(g.spatial_linear(x, &bilinear_matrix(s[2], 2 * s[2]), &bilinear_matrix(s[3], 2 * s[3]))?)
}

/// Small U-Net-style RGB-D segmenter.
#[derive(Clone, Debug)]
pub struct ToySegmenter<T> {
    pub cfg: SegmenterConfig,
    pub enc: Vec<ConvBnRelu<T>>,
    pub dec: Vec<ConvBnRelu<T>>,
    pub head: Conv2d<T>,
}

impl<T: Float> ToySegmenter<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &SegmenterConfig, rng: &mut R) -> Self {
        let geo = match cfg.channel_mode {
            ChannelMode::ThreeChannel => 3,
            ChannelMode::OneChannelReduce => 1,
        };
        let ew = cfg.encoder_widths;
        let dw = cfg.decoder_widths;
        let mut cin = 3 + geo;
        let enc = ew
            .iter()
            .map(|&w| {
                let b = ConvBnRelu::new(cin, w, 3, 2, rng);
                cin = w;
                b
            })
            .collect();
        let skips = [ew[2], ew[1], ew[0]];
        let mut prev = ew[3];
        let dec = (0..3)
            .map(|i| {
                let b = ConvBnRelu::new(prev + skips[i], dw[i], 1, 1, rng);
                prev = dw[i];
                b
            })
            .collect();
        let head = Conv2d::new(dw[2], cfg.num_classes, 1, 1, 0, true, rng);
        Self { cfg: cfg.clone(), enc, dec, head }
    }

    /// `x`: normalized RGB `[B, 3, H, W]`; `geo`: normalized geometric input
    /// `[B, 3, H, W]`. Returns logits `[B, K, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, geo: Var, train: bool) -> Result<Var> {
        let (sx, sg) = (g.shape(x).to_vec(), g.shape(geo).to_vec());
        if sx.len() != 4 || sx[1] != 3 || sx != sg {
            return Err(GpError::Shape(format!("segmenter inputs {sx:?} and {sg:?} must both be [B, 3, H, W]")));
        }
        if sx[2] % 16 != 0 || sx[3] % 16 != 0 {
            return Err(GpError::Shape(format!("segmenter needs H, W divisible by 16, got {}x{}", sx[2], sx[3])));
        }
        let geo = match self.cfg.channel_mode {
            ChannelMode::ThreeChannel => geo,
            ChannelMode::OneChannelReduce => {
                let (c0, c1, c2) = (g.narrow(geo, 1, 0, 1)?, g.narrow(geo, 1, 1, 1)?, g.narrow(geo, 1, 2, 1)?);
                let sum = g.add(c0, c1)?;
                let sum = g.add(sum, c2)?;
                g.scale(sum, T::c(1.0 / 3.0))
            }
        };
        let mut h = g.concat(&[x, geo], 1)?;
        let mut feats = Vec::with_capacity(4);
        for b in &self.enc {
            h = b.forward(g, h, train)?;
            feats.push(h);
        }
        for (i, b) in self.dec.iter().enumerate() {
            let up = up2(g, h)?;
            let cat = g.concat(&[up, feats[2 - i]], 1)?;
            h = b.forward(g, cat, train)?;
        }
        let logits = self.head.forward(g, h)?;
        up2(g, logits)
    }
}

impl<T: Float> Module<T> for ToySegmenter<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.enc.iter().enumerate() {
            b.visit(&join(prefix, &format!("enc.{i}")), f);
        }
        for (i, b) in self.dec.iter().enumerate() {
            b.visit(&join(prefix, &format!("dec.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.enc.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("enc.{i}")), f);
        }
        for (i, b) in self.dec.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("dec.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// A segmenter whose parameters may no longer change. Forward passes run in
/// eval mode and never produce parameter gradients.
#[derive(Clone, Debug)]
pub struct FrozenSegmenter<T> {
    net: ToySegmenter<T>,
    snapshot: Vec<(String, Vec<u8>)>,
}

impl<T: Float> FrozenSegmenter<T> {
    pub fn freeze(mut net: ToySegmenter<T>) -> Self {
        set_requires_grad(&mut net, false);
        let snapshot = snapshot_bits(&net);
        Self { net, snapshot }
    }

    pub fn net(&self) -> &ToySegmenter<T> {
        &self.net
    }

    /// Mutable access that bypasses the freeze; [`FrozenSegmenter::freeze_check`]
    /// reports any change made through it.
    pub fn net_mut_unchecked(&mut self) -> &mut ToySegmenter<T> {
        &mut self.net
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.net.cfg
    }

    /// True iff every parameter and buffer is bit-identical to the snapshot
    /// taken at freeze time.
    pub fn freeze_check(&self) -> bool {
        snapshot_bits(&self.net) == self.snapshot
    }

    /// Name of the first parameter that differs from the snapshot.
    pub fn first_violation(&self) -> Option<String> {
        let now = snapshot_bits(&self.net);
        if now.len() != self.snapshot.len() {
            return Some("<parameter set changed>".into());
        }
        now.into_iter().zip(&self.snapshot).find(|(a, b)| a != *b).map(|(a, _)| a.0)
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, geo: Var) -> Result<Var> {
        self.net.forward(g, x, geo, false)
    }

    /// Eval-mode logits for constant inputs.
    pub fn logits(&self, x: &Tensor<T>, geo: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gv = g.constant(geo.clone());
        let out = self.forward(&mut g, xv, gv)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn depth_normalization_examples() {
        let p = PromptParams::default();
        let d = DepthMap::new(3, 1, vec![0, 255, 122]).unwrap();
        let t = normalize_depth_input::<f64>(&d, &p);
        assert_eq!(t.shape(), &[3, 1, 3]);
        for c in 0..3 {
            assert!((t.data()[c * 3] + 1.714286).abs() < 1e-6);
            assert!((t.data()[c * 3 + 1] - 1.857143).abs() < 1e-6);
        }
        // 122.4 is not representable in 8 bits; check the formula directly.
        assert!((122.4f64 / 255.0 - 0.48).abs() < 1e-12);
    }

    #[test]
    fn logits_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = ToySegmenter::<f32>::new(&SegmenterConfig::default(), &mut rng);
        let seg = FrozenSegmenter::freeze(net);
        let x = gp_tensor::nn::normal(&[1, 3, 64, 64], 1.0, &mut rng);
        let geo = gp_tensor::nn::normal(&[1, 3, 64, 64], 1.0, &mut rng);
        let a = seg.logits(&x, &geo).unwrap();
        assert_eq!(a.shape(), &[1, 5, 64, 64]);
        assert_eq!(a.data(), seg.logits(&x, &geo).unwrap().data());
        assert!(seg.freeze_check());
    }

    #[test]
    fn one_channel_mode_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SegmenterConfig { channel_mode: ChannelMode::OneChannelReduce, ..Default::default() };
        let seg = FrozenSegmenter::freeze(ToySegmenter::<f32>::new(&cfg, &mut rng));
        let x = Tensor::zeros(&[2, 3, 32, 32]);
        assert_eq!(seg.logits(&x, &x).unwrap().shape(), &[2, 5, 32, 32]);
    }

    #[test]
    fn tampering_breaks_freeze() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seg = FrozenSegmenter::freeze(ToySegmenter::<f32>::new(&SegmenterConfig::default(), &mut rng));
        assert!(seg.freeze_check());
        seg.net_mut_unchecked().head.weight.value.data_mut()[0] += 1e-3;
        assert!(!seg.freeze_check());
        assert_eq!(seg.first_violation().as_deref(), Some("head.weight"));
    }

    #[test]
    fn frozen_forward_gives_no_param_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seg = FrozenSegmenter::freeze(ToySegmenter::<f64>::new(&SegmenterConfig::default(), &mut rng));
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 16, 16]));
        let geo = g.leaf(gp_tensor::nn::normal(&[1, 3, 16, 16], 1.0, &mut rng), true);
        let out = seg.forward(&mut g, x, geo).unwrap();
        let loss = g.sum_all(out);
        let grads = g.backward(loss);
        assert!(grads.get(geo).is_some());
        assert!(grads.param(&seg.net().head.weight).is_none());
    }
}
