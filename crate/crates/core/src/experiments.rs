//! Scripted experiments: evaluation sources, report files and the
//! train/evaluate pipelines behind the CLI.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineKind;
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::corruptions::{corrupt_with, corruption_rng, CorruptionKind, CorruptionSpec};
use crate::dataset::{Dataset, Sample, CLASS_NAMES};
use crate::error::{io_err, GpError, Result};
use crate::image::DepthMap;
use crate::prompting::{PromptConfig, PromptModule};
use crate::segmenter::{FrozenSegmenter, SegmenterConfig, ToySegmenter};
use crate::training::{
    build_prompt, evaluate, geo_batch, prompt_batch, train_prompt_module, train_toy_segmenter, Ablations, EpochRecord, PromptNet, Variant,
};
use rand::{Rng, SeedableRng};

/// Where the segmenter's geometric channel comes from. Everything else in
/// the evaluation pipeline is shared.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DepthSource {
    GroundTruth,
    /// All-zero depth map.
    Zero,
    Baseline(BaselineKind),
    Degraded(CorruptionKind, f32),
    /// GeomPrompt output from RGB alone.
    Prompt,
    /// Recovery output from RGB and degraded depth.
    Recovered(CorruptionKind, f32),
}

impl DepthSource {
    pub fn name(&self) -> String {
        match self {
            DepthSource::GroundTruth => "gt_depth".into(),
            DepthSource::Zero => "zero_depth".into(),
            DepthSource::Baseline(k) => k.name().into(),
            DepthSource::Degraded(..) => "degraded".into(),
            DepthSource::Prompt => "geomprompt".into(),
            DepthSource::Recovered(..) => "recovered".into(),
        }
    }

    fn corruption(&self) -> Option<(CorruptionKind, f32)> {
        match *self {
            DepthSource::Degraded(k, s) | DepthSource::Recovered(k, s) => Some((k, s)),
            _ => None,
        }
    }
}

/// Evaluation-time degradation of test sample `index`; the seed depends only
/// on the key and the index.
pub fn degraded_depth(sample: &Sample, index: usize, kind: CorruptionKind, severity: f32, key: u64, cfg: &ExperimentConfig) -> DepthMap {
    let seed = corruption_rng(key, index as u64).random();
    corrupt_with(&sample.depth, &CorruptionSpec::new(kind, severity, seed), &cfg.training.corruption)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub source: String,
    pub kind: Option<String>,
    pub severity: Option<f32>,
    pub miou: f64,
    pub pa: f64,
    pub per_class: Vec<Option<f64>>,
}

/// mIoU and PA of the frozen segmenter on `samples` with the given depth
/// source. Prompt sources need `prompt`.
pub fn evaluate_source(
    cfg: &ExperimentConfig,
    seg: &FrozenSegmenter<f32>,
    samples: &[Sample],
    source: DepthSource,
    prompt: Option<&PromptNet>,
) -> Result<EvalRow> {
    let params = &cfg.prompt.params;
    let s = cfg.training.schedule.s_max;
    let key = cfg.evaluation.corruption_seed;
    let need = |v: Variant| match prompt {
        Some(p) if p.variant() == v => Ok(p),
        _ => Err(GpError::InvalidArgument(format!("source {} needs a trained {} module", source.name(), v.name()))),
    };
    let zero = DepthMap::filled(samples.first().map_or(1, |s| s.depth.width()), samples.first().map_or(1, |s| s.depth.height()), 0);
    let geo = |batch: &[&Sample], start: usize| -> Result<gp_tensor::Tensor<f32>> {
        match source {
            DepthSource::GroundTruth => geo_batch(&batch.iter().map(|s| &s.depth).collect::<Vec<_>>(), params),
            DepthSource::Zero => geo_batch(&vec![&zero; batch.len()], params),
            DepthSource::Baseline(k) => {
                let maps: Vec<DepthMap> = batch.iter().map(|s| k.apply(&s.rgb, &cfg.baselines)).collect();
                geo_batch(&maps.iter().collect::<Vec<_>>(), params)
            }
            DepthSource::Degraded(kind, sev) => {
                let maps: Vec<DepthMap> = batch.iter().enumerate().map(|(i, s)| degraded_depth(s, start + i, kind, sev, key, cfg)).collect();
                geo_batch(&maps.iter().collect::<Vec<_>>(), params)
            }
            DepthSource::Prompt => prompt_batch(need(Variant::GeomPrompt)?, batch, None, s),
            DepthSource::Recovered(kind, sev) => {
                let maps: Vec<DepthMap> = batch.iter().enumerate().map(|(i, s)| degraded_depth(s, start + i, kind, sev, key, cfg)).collect();
                prompt_batch(need(Variant::Recovery)?, batch, Some(&maps.iter().collect::<Vec<_>>()), s)
            }
        }
    };
    let cm = evaluate(seg, samples, cfg.evaluation.batch_size, cfg.eval_threads(), geo)?;
    let c = source.corruption();
    Ok(EvalRow {
        source: source.name(),
        kind: c.map(|(k, _)| k.name().to_string()),
        severity: c.map(|(_, s)| s),
        miou: cm.miou()?,
        pa: cm.pixel_accuracy()?,
        per_class: cm.per_class_iou(),
    })
}

/// CSV with `#` header lines carrying the resolved config and dataset hash.
pub fn eval_csv(title: &str, cfg: &ExperimentConfig, dataset_hash: &str, rows: &[EvalRow]) -> String {
    let mut out = format!("# geomprompt report: {title}\n# dataset_hash = {dataset_hash}\n");
    out.push_str(&cfg.header_lines());
    let k = rows.first().map_or(CLASS_NAMES.len(), |r| r.per_class.len());
    out.push_str("source,kind,severity,miou,pa");
    for c in 0..k {
        let _ = write!(out, ",iou_{}", CLASS_NAMES.get(c).copied().unwrap_or("class"));
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{:.6},{:.6}",
            r.source,
            r.kind.as_deref().unwrap_or(""),
            r.severity.map(|s| format!("{s:.1}")).unwrap_or_default(),
            r.miou,
            r.pa
        );
        for v in &r.per_class {
            let _ = write!(out, ",{}", v.map(|x| format!("{x:.6}")).unwrap_or_default());
        }
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn segmenter_checkpoint(seg: &FrozenSegmenter<f32>) -> Result<Checkpoint> {
    Ok(Checkpoint::from_module("segmenter", serde_json::to_value(seg.config())?, seg.net()))
}

pub fn segmenter_from_checkpoint(ck: &Checkpoint) -> Result<FrozenSegmenter<f32>> {
    ck.expect_kind("segmenter")?;
    let cfg: SegmenterConfig = ck.config()?;
    let mut net = ToySegmenter::<f32>::new(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
    ck.load_into(&mut net)?;
    Ok(FrozenSegmenter::freeze(net))
}

pub fn prompt_checkpoint(net: &PromptNet) -> Result<Checkpoint> {
    Ok(Checkpoint::from_module(net.variant().name(), serde_json::to_value(net.config())?, net))
}

pub fn prompt_from_checkpoint(ck: &Checkpoint) -> Result<PromptNet> {
    let variant = match ck.manifest.kind.as_str() {
        "geomprompt" => Variant::GeomPrompt,
        "recovery" => Variant::Recovery,
        k => return Err(GpError::Checkpoint(format!("expected a prompt checkpoint, found {k}"))),
    };
    let cfg: PromptConfig = ck.config()?;
    let mut net = PromptNet::new(variant, &cfg, 0)?;
    ck.load_into(&mut net)?;
    Ok(net)
}

/// Train and freeze the segmenter, then score it with GT and zero depth.
pub fn train_segmenter(cfg: &ExperimentConfig, ds: &Dataset, log: &mut dyn FnMut(&EpochRecord)) -> Result<(FrozenSegmenter<f32>, Vec<EvalRow>)> {
    let seg = train_toy_segmenter(&ds.train, &cfg.segmenter, &cfg.segmenter_training, &cfg.prompt.params, cfg.seed, log)?;
    let rows = vec![
        evaluate_source(cfg, &seg, &ds.test, DepthSource::GroundTruth, None)?,
        evaluate_source(cfg, &seg, &ds.test, DepthSource::Zero, None)?,
    ];
    Ok((seg, rows))
}

/// Train one prompt module with the configured ablations.
pub fn train_prompt(
    cfg: &ExperimentConfig,
    variant: Variant,
    ablations: &Ablations,
    ds: &Dataset,
    seg: &FrozenSegmenter<f32>,
    seed: u64,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<PromptNet> {
    let mut net = build_prompt(variant, &cfg.prompt, ablations, seed)?;
    let tc = crate::training::PromptTrainConfig { ablations: *ablations, ..cfg.training.clone() };
    let n_val = ds.test.len().min(100);
    train_prompt_module(&mut net, seg, &ds.train, &ds.test[..n_val], &tc, seed, log)?;
    Ok(net)
}

/// GT depth, zero depth, the four RGB-only controls and GeomPrompt under one
/// shared evaluation pipeline.
pub fn baselines_table(cfg: &ExperimentConfig, seg: &FrozenSegmenter<f32>, test: &[Sample], gp: Option<&PromptNet>) -> Result<Vec<EvalRow>> {
    let mut sources = vec![DepthSource::GroundTruth, DepthSource::Zero];
    sources.extend(BaselineKind::ALL.map(DepthSource::Baseline));
    if gp.is_some() {
        sources.push(DepthSource::Prompt);
    }
    sources.into_iter().map(|s| evaluate_source(cfg, seg, test, s, gp)).collect()
}

/// Degraded depth versus recovered prompt for every configured kind and
/// severity.
pub fn corruption_sweep(cfg: &ExperimentConfig, seg: &FrozenSegmenter<f32>, test: &[Sample], gpr: &PromptNet) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for &kind in &cfg.evaluation.sweep_kinds {
        for &sev in &cfg.evaluation.sweep_severities {
            rows.push(evaluate_source(cfg, seg, test, DepthSource::Degraded(kind, sev), None)?);
            rows.push(evaluate_source(cfg, seg, test, DepthSource::Recovered(kind, sev), Some(gpr))?);
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub miou: f64,
    /// `miou - full_miou` for the same seed.
    pub delta: f64,
}

/// Train the full GeomPrompt and each single-switch ablation per seed.
pub fn ablation_study(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    seg: &FrozenSegmenter<f32>,
    names: &[&str],
    log: &mut dyn FnMut(&str, u64, &EpochRecord),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let score = |ab: &Ablations, name: &str, log: &mut dyn FnMut(&str, u64, &EpochRecord)| -> Result<f64> {
            let net = train_prompt(cfg, Variant::GeomPrompt, ab, ds, seg, seed, &mut |r| log(name, seed, r))?;
            Ok(evaluate_source(cfg, seg, &ds.test, DepthSource::Prompt, Some(&net))?.miou)
        };
        let full = score(&Ablations::default(), "full", log)?;
        rows.push(AblationRow { variant: "full".into(), seed, miou: full, delta: 0.0 });
        for &name in names {
            let m = score(&Ablations::single(name)?, name, log)?;
            rows.push(AblationRow { variant: name.into(), seed, miou: m, delta: m - full });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(cfg: &ExperimentConfig, dataset_hash: &str, rows: &[AblationRow]) -> String {
    let mut out = format!("# geomprompt report: ablations\n# dataset_hash = {dataset_hash}\n");
    out.push_str(&cfg.header_lines());
    out.push_str("variant,seed,miou,delta_vs_full\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6},{:+.6}", r.variant, r.seed, r.miou, r.delta);
    }
    out
}
