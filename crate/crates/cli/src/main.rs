use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use geomprompt::baselines::BaselineKind;
use geomprompt::checkpoint::Checkpoint;
use geomprompt::config::{ExperimentConfig, Profile};
use geomprompt::corruptions::{corrupt_with, CorruptionKind, CorruptionSpec};
use geomprompt::dataset::{self, Dataset};
use geomprompt::experiments::{self as exp, DepthSource};
use geomprompt::image::DepthMap;
use geomprompt::prompting::PromptModule;
use geomprompt::resources::resource_report;
use geomprompt::segmenter::FrozenSegmenter;
use geomprompt::training::{Ablations, EpochRecord, PromptNet, Variant};

#[derive(Parser)]
#[command(name = "geomprompt", version, about = "Geometric prompts for frozen RGB-D segmenters")]
struct Cli {
    /// TOML config file; values override the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["paper", "desk"])]
    profile: Option<String>,
    /// Single-threaded, fully reproducible execution.
    #[arg(long, global = true)]
    strict_deterministic: bool,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Override any config key, e.g. `--set training.schedule.total_epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset into `paths.data_dir`.
    GenerateData,
    /// Train and freeze the toy segmenter on GT depth.
    TrainSegmenter,
    /// Train GeomPrompt against the frozen segmenter.
    TrainPrompt,
    /// Train GeomPrompt-Recovery on the corruption mixture.
    TrainRecovery,
    /// Score one depth source.
    Evaluate {
        /// gt, zero, luminance, canny, laplacian, scharr, geomprompt, degraded or recovered.
        #[arg(long, default_value = "gt")]
        source: String,
        #[arg(long, default_value = "noise")]
        kind: String,
        #[arg(long, default_value_t = 0.5)]
        severity: f32,
    },
    /// Degraded depth versus recovered prompt across kinds and severities.
    SweepCorruptions,
    /// GT depth, zero depth, the four RGB-only controls and GeomPrompt.
    Baselines {
        /// Number of test images whose pseudo-depth maps are dumped as PNG.
        #[arg(long, default_value_t = 4)]
        dump: usize,
    },
    /// Train the full model and the five single-switch ablations.
    Ablations,
    /// Degrade one depth PNG.
    Corrupt {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        kind: String,
        #[arg(long)]
        severity: f32,
    },
    /// Parameter count and forward latency of both prompt modules.
    Bench,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let profile = cli.profile.as_deref().map(str::parse::<Profile>).transpose()?;
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p, profile, &cli.overrides)?,
        None => ExperimentConfig::resolve(None, profile, &cli.overrides)?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.strict_deterministic |= cli.strict_deterministic;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!("no command given (see --help)");
    };
    match command {
        Command::GenerateData => generate_data(&cfg),
        Command::TrainSegmenter => train_segmenter(&cfg),
        Command::TrainPrompt => train_prompt(&cfg, Variant::GeomPrompt),
        Command::TrainRecovery => train_prompt(&cfg, Variant::Recovery),
        Command::Evaluate { source, kind, severity } => evaluate(&cfg, &source, &kind, severity),
        Command::SweepCorruptions => sweep(&cfg),
        Command::Baselines { dump } => baselines(&cfg, dump),
        Command::Ablations => ablations(&cfg),
        Command::Corrupt { input, output, kind, severity } => corrupt(&cfg, &input, &output, &kind, severity),
        Command::Bench => bench(&cfg),
    }
}

fn out(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.paths.out_dir.join(name)
}

fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (ds, _) = dataset::load(&cfg.paths.data_dir).with_context(|| format!("loading dataset from {} (run generate-data first)", cfg.paths.data_dir.display()))?;
    eprintln!("dataset: {} train / {} test, hash {}", ds.train.len(), ds.test.len(), &ds.content_hash[..12]);
    Ok(ds)
}

fn load_segmenter(cfg: &ExperimentConfig) -> Result<FrozenSegmenter<f32>> {
    let path = out(cfg, "segmenter.ckpt");
    let ck = Checkpoint::load(&path).with_context(|| "run train-segmenter first")?;
    Ok(exp::segmenter_from_checkpoint(&ck)?)
}

fn load_prompt(cfg: &ExperimentConfig, variant: Variant) -> Result<PromptNet> {
    let path = out(cfg, &format!("{}.ckpt", variant.name()));
    let hint = match variant {
        Variant::GeomPrompt => "run train-prompt first",
        Variant::Recovery => "run train-recovery first",
    };
    let ck = Checkpoint::load(&path).with_context(|| hint)?;
    Ok(exp::prompt_from_checkpoint(&ck)?)
}

/// JSONL epoch log that also echoes a short line to stderr.
struct Log {
    file: BufWriter<File>,
    tag: String,
}

impl Log {
    fn create(path: &Path, tag: &str) -> Result<Self> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d)?;
        }
        Ok(Self { file: BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?), tag: tag.into() })
    }

    fn record(&mut self, r: &EpochRecord) {
        let line = serde_json::to_string(r).expect("record serializes");
        let _ = writeln!(self.file, "{line}");
        let _ = self.file.flush();
        eprintln!(
            "[{}] epoch {:>3} loss {:.4} seg {:.4}{}{}",
            self.tag,
            r.epoch,
            r.loss,
            r.seg,
            r.s.map(|s| format!(" s {s:.1}")).unwrap_or_default(),
            r.val_miou.map(|m| format!(" val mIoU {m:.4}")).unwrap_or_default()
        );
    }
}

fn report(cfg: &ExperimentConfig, name: &str, text: &str) -> Result<()> {
    let path = out(cfg, name);
    exp::write_text(&path, text)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn print_rows(rows: &[exp::EvalRow]) {
    for r in rows {
        let cond = match (&r.kind, r.severity) {
            (Some(k), Some(s)) => format!(" ({k} {s:.1})"),
            _ => String::new(),
        };
        println!("{:<28} mIoU {:.4}  PA {:.4}", format!("{}{cond}", r.source), r.miou, r.pa);
    }
}

fn generate_data(cfg: &ExperimentConfig) -> Result<()> {
    let d = &cfg.dataset;
    let ds = dataset::generate(&d.scene, d.n_train, d.n_test, cfg.seed)?;
    dataset::save(&ds, &cfg.paths.data_dir, &d.scene, cfg.seed)?;
    println!("wrote {} train / {} test samples to {} (hash {})", ds.train.len(), ds.test.len(), cfg.paths.data_dir.display(), ds.content_hash);
    Ok(())
}

fn train_segmenter(cfg: &ExperimentConfig) -> Result<()> {
    let ds = load_data(cfg)?;
    let mut log = Log::create(&out(cfg, "segmenter_log.jsonl"), "segmenter")?;
    let (seg, rows) = exp::train_segmenter(cfg, &ds, &mut |r| log.record(r))?;
    exp::segmenter_checkpoint(&seg)?.save(&out(cfg, "segmenter.ckpt"))?;
    print_rows(&rows);
    report(cfg, "segmenter_eval.csv", &exp::eval_csv("train-segmenter", cfg, &ds.content_hash, &rows))
}

fn train_prompt(cfg: &ExperimentConfig, variant: Variant) -> Result<()> {
    let ds = load_data(cfg)?;
    let seg = load_segmenter(cfg)?;
    let mut log = Log::create(&out(cfg, &format!("{}_log.jsonl", variant.name())), variant.name())?;
    let net = exp::train_prompt(cfg, variant, &cfg.training.ablations, &ds, &seg, cfg.seed, &mut |r| log.record(r))?;
    let path = out(cfg, &format!("{}.ckpt", variant.name()));
    exp::prompt_checkpoint(&net)?.save(&path)?;
    eprintln!("wrote {}", path.display());
    let source = match variant {
        Variant::GeomPrompt => DepthSource::Prompt,
        Variant::Recovery => DepthSource::Recovered(CorruptionKind::Noise, 0.8),
    };
    let rows = vec![exp::evaluate_source(cfg, &seg, &ds.test, source, Some(&net))?];
    print_rows(&rows);
    report(cfg, &format!("{}_eval.csv", variant.name()), &exp::eval_csv(variant.name(), cfg, &ds.content_hash, &rows))
}

fn parse_source(name: &str, kind: &str, severity: f32) -> Result<(DepthSource, Option<Variant>)> {
    let kind = || kind.parse::<CorruptionKind>();
    Ok(match name {
        "gt" | "gt_depth" => (DepthSource::GroundTruth, None),
        "zero" | "zero_depth" => (DepthSource::Zero, None),
        "geomprompt" | "prompt" => (DepthSource::Prompt, Some(Variant::GeomPrompt)),
        "degraded" => (DepthSource::Degraded(kind()?, severity), None),
        "recovered" => (DepthSource::Recovered(kind()?, severity), Some(Variant::Recovery)),
        other => (DepthSource::Baseline(other.parse::<BaselineKind>()?), None),
    })
}

fn evaluate(cfg: &ExperimentConfig, source: &str, kind: &str, severity: f32) -> Result<()> {
    let (src, needs) = parse_source(source, kind, severity)?;
    let ds = load_data(cfg)?;
    let seg = load_segmenter(cfg)?;
    let net = needs.map(|v| load_prompt(cfg, v)).transpose()?;
    let rows = vec![exp::evaluate_source(cfg, &seg, &ds.test, src, net.as_ref())?];
    print_rows(&rows);
    report(cfg, &format!("evaluate_{}.csv", src.name()), &exp::eval_csv("evaluate", cfg, &ds.content_hash, &rows))
}

fn sweep(cfg: &ExperimentConfig) -> Result<()> {
    let ds = load_data(cfg)?;
    let seg = load_segmenter(cfg)?;
    let gpr = load_prompt(cfg, Variant::Recovery)?;
    let rows = exp::corruption_sweep(cfg, &seg, &ds.test, &gpr)?;
    for pair in rows.chunks(2) {
        println!(
            "{:<10} {:.1}  degraded {:.4}  recovered {:.4}  gain {:+.4}",
            pair[0].kind.as_deref().unwrap_or(""),
            pair[0].severity.unwrap_or(0.0),
            pair[0].miou,
            pair[1].miou,
            pair[1].miou - pair[0].miou
        );
    }
    report(cfg, "sweep_corruptions.csv", &exp::eval_csv("sweep-corruptions", cfg, &ds.content_hash, &rows))
}

fn baselines(cfg: &ExperimentConfig, dump: usize) -> Result<()> {
    let ds = load_data(cfg)?;
    let seg = load_segmenter(cfg)?;
    let gp = load_prompt(cfg, Variant::GeomPrompt)?;
    let rows = exp::baselines_table(cfg, &seg, &ds.test, Some(&gp))?;
    print_rows(&rows);
    let dir = out(cfg, "dumps");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, s) in ds.test.iter().take(dump).enumerate() {
        s.depth.save_png(&dir.join(format!("{i:03}_gt_depth.png")))?;
        for k in BaselineKind::ALL {
            k.apply(&s.rgb, &cfg.baselines).save_png(&dir.join(format!("{i:03}_{}.png", k.name())))?;
        }
        let x = geomprompt::training::rgb_batch(&[s])?;
        gp.synthesize(&x, None, cfg.training.schedule.s_max)?.export(0)?.save_png(&dir.join(format!("{i:03}_geomprompt.png")))?;
    }
    report(cfg, "baselines.csv", &exp::eval_csv("baselines", cfg, &ds.content_hash, &rows))
}

fn ablations(cfg: &ExperimentConfig) -> Result<()> {
    let ds = load_data(cfg)?;
    let seg = load_segmenter(cfg)?;
    let mut log = Log::create(&out(cfg, "ablations_log.jsonl"), "ablations")?;
    let rows = exp::ablation_study(cfg, &ds, &seg, &Ablations::NAMES, &mut |name, seed, r| {
        log.tag = format!("{name} seed {seed}");
        log.record(r)
    })?;
    for r in rows.iter().filter(|r| r.variant != "full") {
        println!("{:<16} seed {}  mIoU {:.4}  delta {:+.4}", r.variant, r.seed, r.miou, r.delta);
    }
    report(cfg, "ablations.csv", &exp::ablation_csv(cfg, &ds.content_hash, &rows))
}

fn corrupt(cfg: &ExperimentConfig, input: &Path, output: &Path, kind: &str, severity: f32) -> Result<()> {
    let d = DepthMap::load_png(input)?;
    let spec = CorruptionSpec::new(kind.parse()?, severity, cfg.seed);
    corrupt_with(&d, &spec, &cfg.training.corruption).save_png(output)?;
    println!("{} -> {} ({} at severity {severity})", input.display(), output.display(), spec.kind);
    Ok(())
}

fn bench(cfg: &ExperimentConfig) -> Result<()> {
    let b = &cfg.bench;
    let mut lines = format!("# geomprompt report: bench\n{}variant,param_count,latency_ms,image_size,warmup,runs\n", cfg.header_lines());
    for v in [Variant::GeomPrompt, Variant::Recovery] {
        let net = match load_prompt(cfg, v) {
            Ok(n) => n,
            Err(_) => PromptNet::new(v, &cfg.prompt, cfg.seed)?,
        };
        let r = resource_report(&net, b.image_size, b.warmup, b.runs)?;
        println!("{:<11} {:>10} params  {:.3} ms/forward at {}x{}", v.name(), r.param_count, r.latency_ms, r.image_size, r.image_size);
        lines.push_str(&format!("{},{},{:.4},{},{},{}\n", v.name(), r.param_count, r.latency_ms, r.image_size, r.warmup, r.runs));
    }
    report(cfg, "bench.csv", &lines)
}
