//! `wsr`: data synthesis, warp pretraining, training, inference, evaluation
//! and gradient checking for multi-frame face super-resolution.
//!
//! Results go to stdout in tab- or comma-separated form; diagnostics go to
//! stderr. Exit codes: 0 success, 1 usage, 2 I/O, 3 non-finite loss,
//! 4 failed gradient check.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use wsr_core::checkpoint::Checkpoint;
use wsr_core::evaluation::{self, report_csv};
use wsr_core::gradcheck;
use wsr_core::image_ops::{self, DegradationSpec};
use wsr_core::model::{ArchConfig, GROUP_WARP};
use wsr_core::perceptual::FeatureNetwork;
use wsr_core::run_config::RunConfig;
use wsr_core::synth::{self, central_windows, MotionSpec, SynthConfig};
use wsr_core::training::{self, loss_csv, AdamConfig, EpochRecord, PretrainConfig, Trainer};
use wsr_core::{Error, TensorError};

const CHECKPOINT_FILE: &str = "checkpoint.wsrc";
const LOSS_FILE: &str = "loss.csv";

#[derive(Parser)]
#[command(name = "wsr", version, about = "Multi-frame face super-resolution with learned feature alignment")]
struct Cli {
    /// Worker threads; 1 gives bit-exact reproducibility on any machine.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic face-sequence dataset.
    SynthData(SynthArgs),
    /// Pretrain the warp predictor on (central, adjacent) frame pairs.
    PretrainWarp(PretrainArgs),
    /// Train a model variant from a run configuration.
    Train(TrainArgs),
    /// Reconstruct one sequence of a dataset to a PNG.
    Infer(InferArgs),
    /// Write the metric report for one or more trained checkpoints.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients in f64.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    samples: usize,
    /// Frames per sequence; must be odd.
    #[arg(long, value_parser = odd_count)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Downsample without the anti-aliasing blur.
    #[arg(long)]
    no_blur: bool,
    /// `tiny` (8→32) or `full` (16→128).
    #[arg(long, default_value = "tiny")]
    profile: String,
    /// Consecutive samples sharing one face identity.
    #[arg(long, default_value_t = 2)]
    samples_per_identity: usize,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "tiny")]
    profile: String,
    #[arg(long, default_value_t = PretrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = PretrainConfig::default().batch_size)]
    batch: usize,
    #[arg(long, default_value_t = AdamConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Receives `loss.csv` and `checkpoint.wsrc`.
    #[arg(long)]
    out: PathBuf,
    /// Continue from `<out>/checkpoint.wsrc`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seq_id: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Repeat for several variants; one report row each.
    #[arg(long, required = true)]
    ckpt: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Add ground-truth and bicubic reference rows.
    #[arg(long)]
    baselines: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Restrict to one module's operations.
    #[arg(long)]
    module: Option<String>,
    /// Corrupt the backward pass of one op (mutation test).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn odd_count(s: &str) -> Result<usize, String> {
    let n: usize = s.parse().map_err(|_| format!("{s:?} is not a count"))?;
    if n % 2 == 1 {
        Ok(n)
    } else {
        Err(format!("{n} is not odd; sequences need a central frame"))
    }
}

/// A gradient check ran and failed.
#[derive(Debug)]
struct GradcheckFailed(Vec<&'static str>);

impl fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gradient check failed for: {}", self.0.join(", "))
    }
}

impl std::error::Error for GradcheckFailed {}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<GradcheckFailed>() {
            return 4;
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Io { .. }
                | Error::UnsupportedImage { .. }
                | Error::Image { .. }
                | Error::CorruptCheckpoint(_)
                | Error::CheckpointVersion { .. } => 2,
                Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) | Error::Tensor(TensorError::NonFinite(_)) => 3,
                _ => 1,
            };
        }
        if let Some(TensorError::NonFinite(_)) = cause.downcast_ref::<TensorError>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(Error::Config("--threads must be ≥ 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::PretrainWarp(a) => pretrain_warp(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    }
}

fn degradation_for(profile: &str) -> Result<DegradationSpec> {
    let arch = ArchConfig::by_name(profile)?;
    Ok(if arch.hr_size == DegradationSpec::full().hr_size {
        DegradationSpec::full()
    } else {
        DegradationSpec::tiny()
    })
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let mut degradation = degradation_for(&a.profile)?;
    degradation.apply_blur = !a.no_blur;
    let cfg = SynthConfig {
        samples: a.samples,
        frames: a.frames,
        seed: a.seed,
        degradation,
        motion: MotionSpec::default(),
        samples_per_identity: a.samples_per_identity,
    };
    let samples = synth::synth_dataset(&cfg)?;
    synth::write_dataset(&a.out, &samples)?;
    println!("samples\t{}", samples.len());
    println!("frames\t{}", a.frames);
    println!("hr_size\t{}", degradation.hr_size);
    println!("lr_size\t{}", degradation.lr_size);
    Ok(())
}

fn pretrain_warp(a: PretrainArgs) -> Result<()> {
    let arch = ArchConfig::by_name(&a.profile)?;
    let samples = synth::read_dataset(&a.data)?;
    let pairs = training::pretraining_pairs(&samples);
    if pairs.is_empty() {
        bail!(Error::Data("pretraining needs sequences with more than one frame".into()));
    }
    if pairs[0].0.shape()[1] != arch.lr_size {
        bail!(Error::Data(format!(
            "profile {} expects {}-pixel inputs, dataset has {}",
            a.profile,
            arch.lr_size,
            pairs[0].0.shape()[1]
        )));
    }
    let cfg = PretrainConfig {
        epochs: a.epochs,
        batch_size: a.batch.max(1),
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        seed: a.seed,
    };
    let initial = training::WarpAligner::new(arch.lr_size)?;
    let (predictor, history) = training::pretrain_new(&arch, &pairs, &cfg)?;
    let mut ckpt = Checkpoint::new(&format!("profile = {}\nseed = {}\n", a.profile, a.seed));
    ckpt.epoch = a.epochs as u64;
    ckpt.push_params(GROUP_WARP, &predictor);
    ckpt.save(&a.out)?;
    println!("epoch,mean_loss");
    for (i, l) in history.iter().enumerate() {
        println!("{},{:e}", i + 1, l);
    }
    eprintln!("final pair loss {:.6}", initial.mean_loss(&predictor, &pairs)?);
    Ok(())
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| anyhow!(e).context(format!("reading {}", path.display())))?;
    Ok(RunConfig::parse(&text)?)
}

/// Dataset narrowed to the variant's frame count around the central frame.
fn training_data(dir: &Path, frames: usize) -> Result<Vec<synth::Sample>> {
    let samples = synth::read_dataset(dir)?;
    Ok(central_windows(&samples, frames)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| anyhow!(e).context(format!("writing {}", path.display())))
}

/// Loss rows already written for epochs up to `epoch`.
fn previous_history(path: &Path, epoch: usize) -> Vec<EpochRecord> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let mut it = l.split(',');
            Some(EpochRecord {
                epoch: it.next()?.parse().ok()?,
                mean_loss: it.next()?.parse().ok()?,
                wall_time_s: it.next()?.parse().ok()?,
            })
        })
        .filter(|r| r.epoch <= epoch)
        .collect()
}

fn train(a: TrainArgs) -> Result<()> {
    let config = read_config(&a.config)?;
    let data = training_data(&a.data, config.variant.frames())?;
    fs::create_dir_all(&a.out).map_err(|e| anyhow!(e).context(format!("creating {}", a.out.display())))?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let loss_path = a.out.join(LOSS_FILE);
    let mut trainer = Trainer::new(config)?;
    let mut history = Vec::new();
    if a.resume {
        let info = trainer.restore(&Checkpoint::load(&ckpt_path)?)?;
        if info.config_changed {
            eprintln!("warning: resuming under a configuration that differs from the checkpoint's");
        }
        history = previous_history(&loss_path, trainer.epoch);
        eprintln!("resuming after epoch {}", trainer.epoch);
    }
    write_text(&loss_path, &loss_csv(&history))?;
    let every = trainer.config.checkpoint_every;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "epoch,mean_loss,wall_time_s")?;
    trainer.train(&data, |t, r| {
        history.push(r.clone());
        let row = loss_csv(std::slice::from_ref(r));
        let row = row.lines().nth(1).unwrap_or_default();
        let _ = writeln!(stdout, "{row}");
        fs::write(&loss_path, loss_csv(&history)).map_err(|e| Error::Io {
            path: loss_path.clone(),
            source: e,
        })?;
        if (every > 0 && t.epoch % every == 0) || t.epoch == t.config.epochs {
            t.checkpoint().save(&ckpt_path)?;
        }
        Ok(())
    })?;
    if trainer.epoch == trainer.config.epochs && !ckpt_path.exists() {
        trainer.checkpoint().save(&ckpt_path)?;
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let (config, model) = training::model_from_checkpoint(&Checkpoint::load(&a.ckpt)?)?;
    let samples = training_data(&a.data, config.variant.frames())?;
    let sample = samples
        .iter()
        .find(|s| s.id == a.seq_id)
        .ok_or_else(|| Error::Data(format!("no sequence {:?} in {}", a.seq_id, a.data.display())))?;
    let out = model.infer(&sample.seq)?;
    image_ops::save_image(&out, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn feature_net(config: &RunConfig) -> Result<FeatureNetwork<f32>> {
    Ok(match &config.feature_weights {
        Some(p) => FeatureNetwork::load(p)?,
        None => FeatureNetwork::seeded(config.feature_seed)?,
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let all = synth::read_dataset(&a.data)?;
    let mut rows = Vec::new();
    let mut first_net = None;
    for path in &a.ckpt {
        let (config, model) = training::model_from_checkpoint(&Checkpoint::load(path)?)?;
        let net = feature_net(&config)?;
        let samples = central_windows(&all, config.variant.frames())?;
        rows.push(evaluation::evaluate_model(&model, &samples, &net)?);
        first_net.get_or_insert(net);
    }
    if a.baselines {
        let net = first_net.ok_or_else(|| anyhow!("no checkpoint given"))?;
        rows.extend(evaluation::baseline_rows(&all, &net)?);
    }
    let csv = report_csv(&rows);
    write_text(&a.report, &csv)?;
    print!("{csv}");
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    let results = gradcheck::run_suite(a.seed, a.module.as_deref(), a.inject_fault.as_deref())?;
    println!("op\tmodule\tmax_rel_err\tchecked\tskipped\tverdict");
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&'static str> = results.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(GradcheckFailed(failed).into())
    }
}
