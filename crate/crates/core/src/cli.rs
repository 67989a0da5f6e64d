//! Command-line front end.
//!
//! Exit status: 0 on success, 1 for usage or configuration errors, 2 for
//! data errors, 3 when a verification fails.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_videos, read_feature_file, Manifest, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, write_outputs, EvalOptions};
use crate::model::{load_checkpoint_auto, ModelParams};
use crate::selfcheck::{format_table, gradcheck_suite, SuiteOptions};
use crate::trainer::{infer, train, TrainConfig, TrainOutputs, Trainer};

/// Everything a run can be configured with. Each section is optional in the
/// config file; missing fields take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "savd",
    version,
    about = "Weakly-supervised video anomaly detection with anomalous attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic planted-anomaly dataset.
    Synth(SynthArgs),
    /// Train a detector on a manifest.
    Train(TrainArgs),
    /// Score a test manifest and write the report and curves.
    Eval(EvalArgs),
    /// Write frame scores for one feature file.
    Infer(InferArgs),
    /// Check gradients of every primitive, layer and the full loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON config with optional `synth`, `train` and `eval` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct Hyper {
    /// Segments per training video.
    #[arg(long)]
    segments: Option<usize>,
    /// Suppressed rate.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// Iteration where the positive guide switches to binarized targets.
    #[arg(long)]
    switch_iter: Option<usize>,
    /// Residual factor for suppressed snippets.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    topk_fraction: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    n_normal: Option<usize>,
    #[arg(long)]
    n_abnormal: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Mean-shift magnitude of planted anomalies.
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    hyper: Hyper,
    /// Training manifest (JSON lines).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Start from these weights instead of a fresh initialization.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    hyper: Hyper,
    /// Test manifest with frame labels.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Skip videos without frame labels instead of failing.
    #[arg(long)]
    allow_missing_labels: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    /// Feature file to score.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    segments: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Coordinates sampled per parameter tensor in the loss check.
    #[arg(long)]
    max_coords: Option<usize>,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.synth.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn apply_hyper(cfg: &mut RunConfig, h: &Hyper) {
    let t = &mut cfg.train;
    if let Some(v) = h.segments {
        t.segments = v;
    }
    if let Some(v) = h.eps {
        t.loss.eps = v;
        cfg.eval.eps = v;
    }
    if let Some(v) = h.alpha {
        t.loss.alpha = v;
    }
    if let Some(v) = h.gamma {
        t.loss.gamma = v;
    }
    if let Some(v) = h.mu {
        t.loss.mu = v;
    }
    if let Some(v) = h.switch_iter {
        t.loss.switch_iter = v;
    }
    if let Some(v) = h.beta {
        t.beta = v;
        cfg.eval.beta = v;
    }
    if let Some(v) = h.topk_fraction {
        t.loss.topk_fraction = v;
    }
    if let Some(v) = h.workers {
        t.workers = v;
    }
}

fn print_config(out: &mut dyn Write, cfg: &RunConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg).expect("configs always serialize");
    say(out, format!("resolved config:\n{text}"))
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = resolve(&a.common)?;
    let s = &mut cfg.synth;
    if let Some(v) = a.n_normal {
        s.n_normal = v;
    }
    if let Some(v) = a.n_abnormal {
        s.n_abnormal = v;
    }
    if let Some(v) = a.feature_dim {
        s.feature_dim = v;
    }
    if let Some(v) = a.shift {
        s.shift = v;
    }
    if let Some(v) = a.noise {
        s.noise = v;
    }
    cfg.synth.validate()?;
    print_config(out, &cfg)?;
    let res = generate_synthetic(&cfg.synth, &a.out_dir)?;
    say(
        out,
        format!(
            "wrote {} training videos to {}",
            res.train_videos,
            res.train_manifest.display()
        ),
    )?;
    say(
        out,
        format!(
            "wrote {} test videos to {}",
            res.test_videos,
            res.test_manifest.display()
        ),
    )?;
    Ok(0)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = resolve(&a.common)?;
    apply_hyper(&mut cfg, &a.hyper);
    let t = &mut cfg.train;
    if let Some(v) = a.iterations {
        t.iterations = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    let manifest = Manifest::load(&a.manifest)?;
    let videos = load_videos(&manifest)?;
    let initial = match &a.checkpoint {
        Some(p) => Some(load_checkpoint_auto::<f32>(p, &cfg.train.model)?),
        None => None,
    };
    // The architecture follows the data, or the starting checkpoint.
    match &initial {
        Some(p) => cfg.train.model = p.config().clone(),
        None => {
            if let Some(v) = videos.first() {
                cfg.train.model.feature_dim = v.features.shape()[1];
            }
        }
    }
    cfg.train.validate()?;
    print_config(out, &cfg)?;
    create_dir(&a.out_dir)?;
    let cfg_path = a.out_dir.join("config.json");
    let text = serde_json::to_string_pretty(&cfg).expect("configs always serialize") + "\n";
    fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    let outputs = TrainOutputs {
        dir: a.out_dir.clone(),
    };
    let result = match initial {
        None => train::<f32>(&videos, &cfg.train, Some(&outputs))?,
        Some(p) => Trainer::with_params(&videos, &cfg.train, p)?.run(Some(&outputs))?,
    };
    if let Some(last) = result.log.last() {
        say(
            out,
            format!("step {} total loss {:.6}", last.step, last.loss.total),
        )?;
    }
    say(
        out,
        format!(
            "checkpoint written to {}",
            outputs.final_checkpoint().display()
        ),
    )?;
    Ok(0)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = resolve(&a.common)?;
    apply_hyper(&mut cfg, &a.hyper);
    cfg.eval.allow_missing_labels |= a.allow_missing_labels;
    let params = load_checkpoint_auto::<f32>(&a.checkpoint, &cfg.train.model)?;
    cfg.train.model = params.config().clone();
    print_config(out, &cfg)?;
    let manifest = Manifest::load(&a.manifest)?;
    let eval = evaluate(&params, &manifest, &cfg.eval)?;
    for p in &eval.skipped {
        eprintln!("warning: skipped {} (no frame labels)", p.display());
    }
    create_dir(&a.out_dir)?;
    write_outputs(&eval, &a.out_dir)?;
    let r = &eval.report;
    say(
        out,
        format!(
            "videos {}  frames {}  positive {}",
            r.n_videos, r.n_frames, r.n_positive
        ),
    )?;
    say(
        out,
        format!(
            "auc {:.6}  ap {:.6}  auc_sub {:.6}  ap_sub {:.6}",
            r.auc, r.ap, r.auc_sub, r.ap_sub
        ),
    )?;
    say(
        out,
        format!(
            "report written to {}",
            a.out_dir.join("report.json").display()
        ),
    )?;
    Ok(0)
}

fn cmd_infer(a: InferArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = resolve(&a.common)?;
    let params: ModelParams<f32> = load_checkpoint_auto(&a.checkpoint, &cfg.train.model)?;
    let mut shown = cfg.clone();
    shown.train.model = params.config().clone();
    print_config(out, &shown)?;
    let x = read_feature_file(&a.input)?;
    let frames = infer(&params, &x)?;
    create_dir(&a.out_dir)?;
    let stem = a
        .input
        .file_stem()
        .map_or_else(|| "scores".into(), |s| s.to_string_lossy().into_owned());
    let path = a.out_dir.join(format!("{stem}.csv"));
    let mut text = String::from("index,value\n");
    for (i, v) in frames.iter().enumerate() {
        text += &format!("{i},{v}\n");
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    say(
        out,
        format!(
            "{} frame scores written to {}",
            frames.len(),
            path.display()
        ),
    )?;
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = resolve(&a.common)?;
    print_config(out, &cfg)?;
    let defaults = SuiteOptions::default();
    let opts = SuiteOptions {
        seed: a.common.seed.unwrap_or(defaults.seed),
        segments: a.segments.unwrap_or(defaults.segments),
        feature_dim: a.feature_dim.unwrap_or(defaults.feature_dim),
        max_coords: a.max_coords.or(defaults.max_coords),
        model: cfg.train.model.clone(),
        loss: cfg.train.loss.clone(),
        ..defaults
    };
    let rows = gradcheck_suite(&opts)?;
    write!(out, "{}", format_table(&rows)).map_err(|e| Error::io("<stdout>", e))?;
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed == 0 {
        say(out, format!("all {} checks passed", rows.len()))?;
        Ok(0)
    } else {
        say(out, format!("{failed} of {} checks failed", rows.len()))?;
        Ok(3)
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing progress to `out` and diagnostics to stderr.
pub fn run_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Infer(a) => cmd_infer(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout().lock())
}
