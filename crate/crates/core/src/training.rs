//! Training loops for the toy segmenter and the prompt modules, and batched
//! evaluation against a frozen segmenter.

use gp_tensor::optim::{AdamW, AdamWConfig, GradAccumulator};
use gp_tensor::param::{apply_stat_updates, set_requires_grad};
use gp_tensor::{Graph, Module, Param, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::VitEncoder;
use crate::corruptions::{corrupt_with, corruption_rng, sample_corruption_with, CorruptionConstants};
use crate::dataset::{augment, AugmentConfig, Sample};
use crate::error::{GpError, Result};
use crate::image::DepthMap;
use crate::losses::{ohem_cross_entropy, total_loss, LossWeights, OhemConfig};
use crate::metrics::{argmax_labels, ConfusionMatrix};
use crate::prompting::{param_group, GeomPrompt, ParamGroup, PromptConfig, PromptModule, PromptVars};
use crate::recovery::GeomPromptRecovery;
use crate::schedule::{poly_lr, residual_bound_schedule, ScheduleConfig};
use crate::segmenter::{normalize_depth_input, normalize_rgb, FrozenSegmenter, SegmenterConfig, ToySegmenter};
use crate::prompting::PromptParams;

/// Normalized RGB `[B, 3, H, W]`.
pub fn rgb_batch(samples: &[&Sample]) -> Result<Tensor<f32>> {
    Ok(Tensor::stack(&samples.iter().map(|s| normalize_rgb(&s.rgb)).collect::<Vec<_>>(), false)?)
}

/// Normalized, replicated depth `[B, 3, H, W]`.
pub fn geo_batch(depths: &[&DepthMap], params: &PromptParams) -> Result<Tensor<f32>> {
    Ok(Tensor::stack(&depths.iter().map(|d| normalize_depth_input(d, params)).collect::<Vec<_>>(), false)?)
}

/// Raw depth `[B, 1, H, W]`.
pub fn raw_depth_batch(depths: &[&DepthMap]) -> Result<Tensor<f32>> {
    Ok(Tensor::stack(&depths.iter().map(|d| crate::segmenter::depth_tensor(d)).collect::<Vec<_>>(), false)?)
}

pub fn label_batch(samples: &[&Sample]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.label.data().iter().copied()).collect()
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub s: Option<f64>,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub loss: f64,
    pub seg: f64,
    pub tv: f64,
    pub l1: f64,
    pub val_miou: Option<f64>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(epoch as u64 + 1);
    r
}

fn check_finite(v: f64, what: &str, epoch: usize, step: usize, detail: impl FnOnce() -> String) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(GpError::NonFinite { what: what.to_string(), epoch, step, detail: detail() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub augment: AugmentConfig,
}

impl Default for SegmenterTrainConfig {
    fn default() -> Self {
        Self { epochs: 60, batch_size: 16, lr: 2e-3, weight_decay: 1e-4, warmup_epochs: 1, augment: AugmentConfig::default() }
    }
}

/// Train the toy segmenter with plain cross-entropy on (RGB, GT depth) and
/// freeze it.
pub fn train_toy_segmenter(
    train: &[Sample],
    seg_cfg: &SegmenterConfig,
    tc: &SegmenterTrainConfig,
    params: &PromptParams,
    seed: u64,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<FrozenSegmenter<f32>> {
    if train.is_empty() {
        return Err(GpError::Dataset("training set is empty".into()));
    }
    if tc.batch_size == 0 || tc.epochs == 0 || (tc.warmup_epochs > 0 && tc.warmup_epochs >= tc.epochs) {
        return Err(GpError::Config("segmenter training needs batch_size > 0 and warmup_epochs < epochs".into()));
    }
    let mut net = ToySegmenter::<f32>::new(seg_cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut opt = AdamW::new(AdamWConfig { weight_decay: tc.weight_decay, ..Default::default() });
    let plain = OhemConfig { thresh: 1.0, min_kept: 0.0 };
    let steps = train.len().div_ceil(tc.batch_size);
    let total = steps * tc.epochs;
    let warmup = steps * tc.warmup_epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..tc.epochs {
        let mut rng = epoch_rng(seed, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (i, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk.iter().map(|&j| augment(&train[j], &tc.augment, &mut rng)).collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let depths: Vec<&DepthMap> = batch.iter().map(|s| &s.depth).collect();
            let mut g = Graph::new();
            let x = g.constant(rgb_batch(&refs)?);
            let geo = g.constant(geo_batch(&depths, params)?);
            let logits = net.forward(&mut g, x, geo, true)?;
            let loss = ohem_cross_entropy(&mut g, logits, &label_batch(&refs), &plain)?;
            let v = g.value(loss).item() as f64;
            check_finite(v, "segmenter loss", epoch, i, || format!("batch {chunk:?}"))?;
            let grads = g.backward(loss);
            lr = poly_lr(step, total, warmup, tc.lr, 0.9);
            opt.step(&mut net, &grads, &|_| Some(lr));
            apply_stat_updates(&mut net, &g);
            loss_sum += v;
            step += 1;
        }
        let mean = loss_sum / steps as f64;
        log(&EpochRecord { epoch, steps, s: None, lr_encoder: lr, lr_decoder: lr, loss: mean, seg: mean, tv: 0.0, l1: 0.0, val_miou: None });
    }
    Ok(FrozenSegmenter::freeze(net))
}

/// Confusion matrix of the frozen segmenter over `samples`, where `geo`
/// builds the normalized geometric input `[B, 3, H, W]` for a batch starting
/// at the given sample index. With `threads > 1` the samples are sharded
/// and the per-shard matrices merged.
pub fn evaluate<F>(seg: &FrozenSegmenter<f32>, samples: &[Sample], batch: usize, threads: usize, geo: F) -> Result<ConfusionMatrix>
where
    F: Fn(&[&Sample], usize) -> Result<Tensor<f32>> + Sync,
{
    let k = seg.config().num_classes;
    let batch = batch.max(1);
    let run = |start: usize, part: &[Sample]| -> Result<ConfusionMatrix> {
        let mut cm = ConfusionMatrix::new(k);
        for (ci, chunk) in part.chunks(batch).enumerate() {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let x = rgb_batch(&refs)?;
            let gt = geo(&refs, start + ci * batch)?;
            let logits = seg.logits(&x, &gt)?;
            let (h, w) = (logits.dim(2), logits.dim(3));
            for (n, s) in chunk.iter().enumerate() {
                let item = logits.batch_item(n);
                cm.accumulate(&s.label, &argmax_labels(item.data(), k, w, h))?;
            }
        }
        Ok(cm)
    };
    let threads = threads.max(1).min(samples.len().max(1));
    if threads == 1 {
        return run(0, samples);
    }
    let per = samples.len().div_ceil(threads).div_ceil(batch) * batch;
    let parts: Vec<Result<ConfusionMatrix>> = std::thread::scope(|sc| {
        let handles: Vec<_> = samples.chunks(per).enumerate().map(|(i, part)| sc.spawn(move || run(i * per, part))).collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut cm = ConfusionMatrix::new(k);
    for p in parts {
        cm.merge(&p?)?;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[serde(rename = "geomprompt")]
    GeomPrompt,
    Recovery,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::GeomPrompt => "geomprompt",
            Variant::Recovery => "recovery",
        }
    }
}

/// Training-time switches; all off is the full method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Hold `s` at `s_max` instead of ramping it.
    pub constant_s: bool,
    pub no_adapter: bool,
    pub no_lowpass: bool,
    /// Zero both regularizer weights.
    pub no_regularizers: bool,
    /// Keep the RGB encoder at its initial weights.
    pub freeze_encoder: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 5] = ["constant_s", "no_adapter", "no_lowpass", "no_regularizers", "freeze_encoder"];

    /// The variant with only the named switch on.
    pub fn single(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name {
            "constant_s" => a.constant_s = true,
            "no_adapter" => a.no_adapter = true,
            "no_lowpass" => a.no_lowpass = true,
            "no_regularizers" => a.no_regularizers = true,
            "freeze_encoder" => a.freeze_encoder = true,
            _ => return Err(GpError::InvalidArgument(format!("unknown ablation {name:?}; expected one of {:?}", Self::NAMES))),
        }
        Ok(a)
    }

    /// Architecture with the adapter / low-pass switches applied.
    pub fn prompt_config(&self, base: &PromptConfig) -> PromptConfig {
        PromptConfig { use_adapter: base.use_adapter && !self.no_adapter, use_lowpass: base.use_lowpass && !self.no_lowpass, ..base.clone() }
    }

    pub fn loss_weights(&self, base: &LossWeights) -> LossWeights {
        if self.no_regularizers {
            LossWeights::NONE
        } else {
            *base
        }
    }

    /// `s` for an epoch under this ablation.
    pub fn residual_bound(&self, epoch: usize, sched: &ScheduleConfig) -> f64 {
        if self.constant_s {
            sched.s_max
        } else {
            residual_bound_schedule(epoch, sched)
        }
    }
}

/// Either prompt-module variant.
#[derive(Clone, Debug)]
pub enum PromptNet {
    GeomPrompt(GeomPrompt<f32>),
    Recovery(GeomPromptRecovery<f32>),
}

impl PromptNet {
    pub fn new(variant: Variant, cfg: &PromptConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match variant {
            Variant::GeomPrompt => PromptNet::GeomPrompt(GeomPrompt::new(cfg, &mut rng)?),
            Variant::Recovery => PromptNet::Recovery(GeomPromptRecovery::new(cfg, &mut rng)?),
        })
    }

    pub fn variant(&self) -> Variant {
        match self {
            PromptNet::GeomPrompt(_) => Variant::GeomPrompt,
            PromptNet::Recovery(_) => Variant::Recovery,
        }
    }

    fn inner(&self) -> &dyn PromptModule<f32> {
        match self {
            PromptNet::GeomPrompt(m) => m,
            PromptNet::Recovery(m) => m,
        }
    }
}

impl Module<f32> for PromptNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f32>)) {
        match self {
            PromptNet::GeomPrompt(m) => m.visit(prefix, f),
            PromptNet::Recovery(m) => m.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
        match self {
            PromptNet::GeomPrompt(m) => m.visit_mut(prefix, f),
            PromptNet::Recovery(m) => m.visit_mut(prefix, f),
        }
    }
}

impl PromptModule<f32> for PromptNet {
    fn config(&self) -> &PromptConfig {
        self.inner().config()
    }

    fn forward(&self, g: &mut Graph<f32>, x: Var, depth: Option<Var>, s: f64, train: bool) -> Result<PromptVars> {
        self.inner().forward(g, x, depth, s, train)
    }

    fn needs_depth(&self) -> bool {
        self.inner().needs_depth()
    }

    fn encoder_mut(&mut self) -> &mut VitEncoder<f32> {
        match self {
            PromptNet::GeomPrompt(m) => &mut m.encoder,
            PromptNet::Recovery(m) => &mut m.encoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptTrainConfig {
    pub schedule: ScheduleConfig,
    pub loss: LossWeights,
    pub ohem: OhemConfig,
    pub augment: AugmentConfig,
    pub corruption: CorruptionConstants,
    pub ablations: Ablations,
    /// Validate every this many epochs (0 disables).
    pub val_every: usize,
    /// Cap on optimizer steps per epoch (0 means one pass over the data).
    pub max_steps_per_epoch: usize,
}

impl Default for PromptTrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::desk(),
            loss: LossWeights::default(),
            ohem: OhemConfig::default(),
            augment: AugmentConfig::default(),
            corruption: CorruptionConstants::default(),
            ablations: Ablations::default(),
            val_every: 0,
            max_steps_per_epoch: 0,
        }
    }
}

/// Build a prompt module with the ablation switches applied to its
/// architecture.
pub fn build_prompt(variant: Variant, base: &PromptConfig, ablations: &Ablations, seed: u64) -> Result<PromptNet> {
    PromptNet::new(variant, &ablations.prompt_config(base), seed)
}

/// Eval-mode `p*` for a batch. The recovery variant needs `depths`.
pub fn prompt_batch(net: &PromptNet, samples: &[&Sample], depths: Option<&[&DepthMap]>, s: f64) -> Result<Tensor<f32>> {
    let x = rgb_batch(samples)?;
    let d = match (net.needs_depth(), depths) {
        (true, Some(d)) => Some(raw_depth_batch(d)?),
        (true, None) => return Err(GpError::InvalidArgument("recovery needs degraded depth".into())),
        (false, _) => None,
    };
    Ok(net.synthesize(&x, d.as_ref(), s)?.p_star)
}

/// Optimize the prompt module against the frozen segmenter with the
/// composite loss. Only `net` changes; the segmenter is checked for
/// bit-identity after every optimizer step.
pub fn train_prompt_module(
    net: &mut PromptNet,
    seg: &FrozenSegmenter<f32>,
    train: &[Sample],
    val: &[Sample],
    cfg: &PromptTrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<()> {
    if train.is_empty() {
        return Err(GpError::Dataset("training set is empty".into()));
    }
    let sched = &cfg.schedule;
    sched.validate()?;
    if !seg.freeze_check() {
        return Err(GpError::FreezeViolation(seg.first_violation().unwrap_or_default()));
    }
    let ab = cfg.ablations;
    let weights = ab.loss_weights(&cfg.loss);
    if ab.freeze_encoder {
        set_requires_grad(net.encoder_mut(), false);
    }
    let micro = sched.batch_size_device;
    let n_micro = sched.batch_size_effective / micro;
    let full = train.len().div_ceil(sched.batch_size_effective);
    let steps = if cfg.max_steps_per_epoch > 0 { full.min(cfg.max_steps_per_epoch) } else { full };
    let total = steps * sched.total_epochs;
    let warmup = steps * sched.warmup_epochs;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: sched.weight_decay, ..Default::default() });
    let mut acc = GradAccumulator::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..sched.total_epochs {
        let s = ab.residual_bound(epoch, sched);
        let mut rng = epoch_rng(seed, epoch);
        order.shuffle(&mut rng);
        let mut cursor = 0;
        let (mut sum_total, mut sum_seg, mut sum_tv, mut sum_l1) = (0.0, 0.0, 0.0, 0.0);
        let lr_enc = |st| if ab.freeze_encoder { 0.0 } else { poly_lr(st, total, warmup, sched.base_lr_encoder, sched.poly_power) };
        let lr_dec = |st| poly_lr(st, total, warmup, sched.base_lr_decoder, sched.poly_power);
        for i in 0..steps {
            acc.clear();
            for _ in 0..n_micro {
                let idx: Vec<usize> = (0..micro).map(|j| order[(cursor + j) % order.len()]).collect();
                cursor += micro;
                let batch: Vec<Sample> = idx.iter().map(|&j| augment(&train[j], &cfg.augment, &mut rng)).collect();
                let refs: Vec<&Sample> = batch.iter().collect();
                let mut g = Graph::new();
                let x = g.constant(rgb_batch(&refs)?);
                let depth = if net.needs_depth() {
                    let degraded: Vec<DepthMap> = batch
                        .iter()
                        .map(|s| {
                            let spec = sample_corruption_with(&mut rng, &cfg.corruption);
                            corrupt_with(&s.depth, &spec, &cfg.corruption)
                        })
                        .collect();
                    Some(g.constant(raw_depth_batch(&degraded.iter().collect::<Vec<_>>())?))
                } else {
                    None
                };
                let pv = net.forward(&mut g, x, depth, s, true)?;
                let logits = seg.forward(&mut g, x, pv.p_star)?;
                let terms = total_loss(&mut g, logits, &label_batch(&refs), pv.p_raw, pv.delta, &weights, &cfg.ohem)?;
                let v = g.value(terms.total).item() as f64;
                check_finite(v, "prompt loss", epoch, i, || {
                    format!(
                        "seg {} tv {} l1 {} s {s} samples {idx:?}",
                        g.value(terms.seg).item(),
                        g.value(terms.tv).item(),
                        g.value(terms.l1).item()
                    )
                })?;
                let grads = g.backward(terms.total);
                acc.add(&*net, &grads, 1.0 / n_micro as f64);
                apply_stat_updates(net, &g);
                sum_total += v;
                sum_seg += g.value(terms.seg).item() as f64;
                sum_tv += g.value(terms.tv).item() as f64;
                sum_l1 += g.value(terms.l1).item() as f64;
            }
            let (le, ld) = (lr_enc(step), lr_dec(step));
            opt.step_accumulated(net, &acc, &|name| match param_group(name) {
                ParamGroup::Encoder if ab.freeze_encoder => None,
                ParamGroup::Encoder => Some(le),
                ParamGroup::Decoder => Some(ld),
            });
            step += 1;
            if !seg.freeze_check() {
                return Err(GpError::FreezeViolation(seg.first_violation().unwrap_or_default()));
            }
        }
        let val_miou = if cfg.val_every > 0 && !val.is_empty() && (epoch + 1) % cfg.val_every == 0 {
            Some(prompt_miou(net, seg, val, s, &cfg.corruption, seed)?)
        } else {
            None
        };
        let n = (steps * n_micro) as f64;
        log(&EpochRecord {
            epoch,
            steps,
            s: Some(s),
            lr_encoder: lr_enc(step.saturating_sub(1)),
            lr_decoder: lr_dec(step.saturating_sub(1)),
            loss: sum_total / n,
            seg: sum_seg / n,
            tv: sum_tv / n,
            l1: sum_l1 / n,
            val_miou,
        });
    }
    Ok(())
}

/// Validation mIoU of a prompt module; the recovery variant sees depth
/// degraded by the training mixture with per-sample keyed seeds.
pub fn prompt_miou(net: &PromptNet, seg: &FrozenSegmenter<f32>, val: &[Sample], s: f64, k: &CorruptionConstants, seed: u64) -> Result<f64> {
    let cm = evaluate(seg, val, 16, 1, |batch, start| {
        if net.needs_depth() {
            let degraded: Vec<DepthMap> = batch
                .iter()
                .enumerate()
                .map(|(i, smp)| {
                    let mut rng = corruption_rng(seed ^ 0x5eed, (start + i) as u64);
                    let spec = sample_corruption_with(&mut rng, k);
                    corrupt_with(&smp.depth, &spec, k)
                })
                .collect();
            prompt_batch(net, batch, Some(&degraded.iter().collect::<Vec<_>>()), s)
        } else {
            prompt_batch(net, batch, None, s)
        }
    })?;
    cm.miou()
}
