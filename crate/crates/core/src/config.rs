//! Experiment configuration: named profiles, TOML files and dotted-key
//! overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConstants;
use crate::corruptions::CorruptionKind;
use crate::dataset::{AugmentConfig, SceneSpec};
use crate::error::{io_err, GpError, Result};
use crate::prompting::PromptConfig;
use crate::schedule::ScheduleConfig;
use crate::segmenter::SegmenterConfig;
use crate::training::{PromptTrainConfig, SegmenterTrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Desk,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

impl FromStr for Profile {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(GpError::Config(format!("unknown profile {s:?} (expected paper or desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub scene: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Worker threads for sharded evaluation; forced to 1 in strict mode.
    pub threads: usize,
    pub sweep_kinds: Vec<CorruptionKind>,
    pub sweep_severities: Vec<f32>,
    /// Key for the per-sample corruption seeds used at evaluation time.
    pub corruption_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup: usize,
    pub runs: usize,
    pub image_size: usize,
}

/// Everything a command needs, fully resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Seeds for the multi-seed prompt experiments.
    pub seeds: Vec<u64>,
    pub strict_deterministic: bool,
    pub paths: PathsConfig,
    pub dataset: DatasetConfig,
    pub segmenter: SegmenterConfig,
    pub segmenter_training: SegmenterTrainConfig,
    pub prompt: PromptConfig,
    pub training: PromptTrainConfig,
    pub baselines: BaselineConstants,
    pub evaluation: EvalConfig,
    pub bench: BenchConfig,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            seed: 0,
            seeds: vec![0, 1, 2],
            strict_deterministic: false,
            paths: PathsConfig { data_dir: "data".into(), out_dir: "runs".into() },
            dataset: DatasetConfig { n_train: 2000, n_test: 500, scene: SceneSpec::default() },
            segmenter: SegmenterConfig::default(),
            segmenter_training: SegmenterTrainConfig::default(),
            prompt: PromptConfig::desk(),
            training: PromptTrainConfig { schedule: ScheduleConfig::desk(), val_every: 5, ..Default::default() },
            baselines: BaselineConstants::default(),
            evaluation: EvalConfig {
                batch_size: 16,
                threads: 1,
                sweep_kinds: vec![CorruptionKind::Quantize, CorruptionKind::Dropout, CorruptionKind::Noise],
                sweep_severities: (1..=9).map(|i| i as f32 / 10.0).collect(),
                corruption_seed: 1234,
            },
            bench: BenchConfig { warmup: 10, runs: 50, image_size: 64 },
        }
    }

    /// Paper-scale architecture and schedule on 480×480 synthetic scenes.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.profile = Profile::Paper;
        c.dataset.scene.size = 480;
        c.prompt = PromptConfig::paper();
        c.training.schedule = ScheduleConfig::paper();
        c.training.augment = AugmentConfig { crop: 480, ..AugmentConfig::default() };
        c.segmenter_training.augment = c.training.augment;
        c.bench.image_size = 480;
        c
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Resolve: profile defaults (the file's `profile` key or `profile`
    /// argument, which wins), then the file, then `key=value` overrides.
    pub fn resolve(file: Option<&str>, profile: Option<Profile>, overrides: &[String]) -> Result<Self> {
        let file_value: toml::Table = match file {
            Some(text) => text.parse().map_err(|e| GpError::Config(format!("config file: {e}")))?,
            None => toml::Table::new(),
        };
        let from_file = match file_value.get("profile") {
            Some(toml::Value::String(s)) => Some(s.parse()?),
            Some(_) => return Err(GpError::Config("profile must be a string".into())),
            None => None,
        };
        let profile = profile.or(from_file).unwrap_or(Profile::Desk);
        let mut base = toml::Table::try_from(Self::for_profile(profile)).map_err(|e| GpError::Config(e.to_string()))?;
        merge(&mut base, file_value);
        base.insert("profile".into(), toml::Value::String(profile.to_string()));
        for o in overrides {
            apply_override(&mut base, o)?;
        }
        let cfg: Self = toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| GpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Option<Profile>, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::resolve(Some(&text), profile, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.prompt.validate()?;
        self.training.schedule.validate()?;
        self.training.loss.validate()?;
        self.dataset.scene.validate()?;
        if self.seeds.is_empty() {
            return Err(GpError::Config("seeds must not be empty".into()));
        }
        if self.training.augment.crop % 16 != 0 || self.training.augment.crop == 0 {
            return Err(GpError::Config("crop must be a positive multiple of 16".into()));
        }
        if self.evaluation.batch_size == 0 || self.bench.runs == 0 {
            return Err(GpError::Config("evaluation.batch_size and bench.runs must be positive".into()));
        }
        if self.evaluation.sweep_severities.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(GpError::Config("sweep severities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The resolved config as `# `-prefixed lines, for report headers.
    pub fn header_lines(&self) -> String {
        self.to_toml().lines().map(|l| format!("# {l}\n")).collect()
    }

    /// Threads to use for evaluation under the determinism setting.
    pub fn eval_threads(&self) -> usize {
        if self.strict_deterministic {
            1
        } else {
            self.evaluation.threads.max(1)
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Apply `a.b.c=value`, where `value` is parsed as a TOML literal and falls
/// back to a plain string.
pub fn apply_override(base: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| GpError::Config(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = base;
    for p in &parts[..parts.len() - 1] {
        table = match table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
            toml::Value::Table(t) => t,
            _ => return Err(GpError::Config(format!("override {key:?}: {p} is not a table"))),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_resolve_and_roundtrip() {
        let desk = ExperimentConfig::resolve(None, None, &[]).unwrap();
        assert_eq!(desk, ExperimentConfig::desk());
        let back = ExperimentConfig::resolve(Some(&desk.to_toml()), None, &[]).unwrap();
        assert_eq!(back, desk);
        let paper = ExperimentConfig::resolve(None, Some(Profile::Paper), &[]).unwrap();
        assert_eq!(paper.training.schedule.total_epochs, 300);
        assert_eq!(paper.prompt.encoder.embed_dim, 384);
    }

    #[test]
    fn file_and_overrides_layer() {
        let text = "profile = \"paper\"\nseed = 9\n[training.schedule]\ntotal_epochs = 20\n";
        let c = ExperimentConfig::resolve(Some(text), None, &["training.ablations.constant_s=true".into(), "paths.out_dir=elsewhere".into()]).unwrap();
        assert_eq!(c.profile, Profile::Paper);
        assert_eq!(c.seed, 9);
        assert_eq!(c.training.schedule.total_epochs, 20);
        assert_eq!(c.training.schedule.warmup_epochs, 10);
        assert!(c.training.ablations.constant_s);
        assert_eq!(c.paths.out_dir, PathBuf::from("elsewhere"));
        let desk = ExperimentConfig::resolve(Some(text), Some(Profile::Desk), &[]).unwrap();
        assert_eq!(desk.profile, Profile::Desk);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::resolve(Some("bogus = 1"), None, &[]).is_err());
        assert!(ExperimentConfig::resolve(Some("[training]\nlearning = 1"), None, &[]).is_err());
        assert!(ExperimentConfig::resolve(None, None, &["training.schedule.s_min=100.0".into()]).is_err());
        assert!(ExperimentConfig::resolve(Some("profile = \"huge\""), None, &[]).is_err());
        assert!(ExperimentConfig::resolve(None, None, &["seed".into()]).is_err());
    }

    #[test]
    fn header_lines_are_comments() {
        let h = ExperimentConfig::desk().header_lines();
        assert!(h.lines().all(|l| l.starts_with('#')));
        assert!(h.contains("profile = \"desk\""));
    }
}
