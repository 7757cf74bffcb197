#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod args;
mod manifest;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};
use mrmp_core::autodiff::Real;
use mrmp_core::data::{synth_dataset, write_jsonl, SynthSpec};
use mrmp_core::distribution::TargetPrior;
use mrmp_core::gcn::{read_checkpoint, write_checkpoint};
use mrmp_core::gradcheck::{run_gradcheck, GradcheckOptions, DEFAULT_TOLERANCE};
use mrmp_core::training::{fmt_sig9, TrainConfig, DEFAULT_RATES};

use args::{parse_pair, Arch, Mode, Precision, Prior, Rates};
use manifest::{RunConfig, RunManifest};

const SWEEP_GRID: &str = "0.50:0.99:0.01";

#[derive(Parser)]
#[command(name = "mrmp", version, about = "Multi-rate magnitude pruning of skeleton GCNs")]
struct Cli {
    /// Floating-point width of training and inference.
    #[arg(long, env = "MRMP_PRECISION", value_enum, default_value = "f64", global = true)]
    precision: Precision,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, logs, summary and manifest.
    Train(TrainArgs),
    /// Mask a trained checkpoint at any rate without retraining.
    Extrapolate(ExtrapolateArgs),
    /// Evaluate a checkpoint over a rate grid and emit CSV.
    Sweep(SweepArgs),
    /// Compare every analytical gradient against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic skeleton dataset as JSONL.
    Synth(SynthArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "mrmp")]
    mode: Mode,
    /// `synth` or a JSONL file of skeleton sequences.
    #[arg(long, default_value = "synth")]
    data: String,
    /// Seed of the synthetic data.
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    #[arg(long, value_enum, default_value = "compact")]
    arch: Arch,
    #[arg(long, value_enum, default_value = "gaussian")]
    prior: Prior,
    /// Prior parameters `a,b`: lo,hi (uniform), mean,std (gaussian) or mean,scale (laplace).
    #[arg(long, value_parser = parse_pair)]
    prior_params: Option<(f64, f64)>,
    /// `start:stop:step,extra,...`, strictly increasing. Single-rate modes take one rate.
    #[arg(long, value_parser = Rates::from_str)]
    rates: Option<Rates>,
    /// Weight of the KLD term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Weight of the l1 penalty in `l1` mode.
    #[arg(long, default_value_t = 1e-3)]
    lambda1: f64,
    #[arg(long)]
    epochs: Option<usize>,
    /// Masked fine-tuning epochs in `mp` mode.
    #[arg(long, default_value_t = 100)]
    finetune_epochs: usize,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    /// Histogram bins.
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
    /// Seed of initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Re-run the configuration recorded in a manifest; other training flags are ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ExtrapolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    rate: f64,
    /// Evaluate on the held-out split of this source (`synth`, `manifest` or a JSONL path).
    #[arg(long)]
    data: Option<String>,
    /// Manifest of the run; defaults to the one beside the checkpoint.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Write the masked model as a new checkpoint.
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = Rates::from_str, default_value = SWEEP_GRID)]
    rates: Rates,
    /// Evaluation source; defaults to the training run's held-out split.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Corrupt the analytical gradient of one check.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    joints: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

fn usage_error(message: String) -> ! {
    Cli::command().error(ErrorKind::ValueValidation, message).exit()
}

macro_rules! dispatch {
    ($p:expr, $f:ident, $($arg:expr),*) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, cli.precision),
        Command::Extrapolate(a) => dispatch!(cli.precision, cmd_extrapolate, a),
        Command::Sweep(a) => dispatch!(cli.precision, cmd_sweep, a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn resolve(a: &TrainArgs, precision: Precision) -> Result<RunConfig> {
    let single = a.mode != Mode::Mrmp;
    let rates = match &a.rates {
        Some(Rates(r)) if single && r.len() != 1 => {
            usage_error(format!("--mode {} trains a single rate, got {}", a.mode.name(), r.len()))
        }
        Some(Rates(r)) => r.clone(),
        None if a.mode == Mode::Mrmp => DEFAULT_RATES.to_vec(),
        None if a.mode == Mode::Dense => vec![0.0],
        None => vec![DEFAULT_RATES[DEFAULT_RATES.len() - 1]],
    };
    let prior = match a.prior_params {
        Some((p0, p1)) => TargetPrior::from_params(a.prior.into(), p0, p1)?,
        None => TargetPrior::default_for(a.prior.into()),
    };
    let d = TrainConfig::default();
    let train = TrainConfig {
        lambda: a.lambda.unwrap_or(d.lambda),
        rates,
        prior,
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch.unwrap_or(d.batch_size),
        lr0: a.lr0.unwrap_or(d.lr0),
        seed: a.seed.unwrap_or(d.seed),
        bins: a.bins.unwrap_or(d.bins),
        sigma0: a.sigma0.unwrap_or(d.sigma0),
        sigma_max: a.sigma_max.unwrap_or(d.sigma_max),
    };
    train.validate()?;
    let (train_set, _) = run::load_data(&a.data, a.data_seed)?;
    Ok(RunConfig {
        mode: a.mode,
        data: a.data.clone(),
        data_seed: a.data_seed,
        arch: a.arch,
        model: run::model_config(a.arch, &train_set)?,
        train,
        lambda1: a.lambda1,
        finetune_epochs: a.finetune_epochs,
        precision,
    })
}

fn cmd_train(a: TrainArgs, precision: Precision) -> Result<ExitCode> {
    let config = match &a.manifest {
        Some(path) => RunManifest::load(path)?.config,
        None => resolve(&a, precision)?,
    };
    dispatch!(config.precision, train_with, &config, &a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn train_with<T: Real>(config: &RunConfig, out: &Path) -> Result<()> {
    run::train::<T>(config, out)
}

fn load_run(checkpoint: &Path, manifest: Option<&PathBuf>) -> Result<RunManifest> {
    if !checkpoint.is_file() {
        bail!("checkpoint {} not found", checkpoint.display());
    }
    let path = manifest.cloned().unwrap_or_else(|| RunManifest::beside(checkpoint));
    RunManifest::load(&path).context("a run manifest is needed for the prior and trained rates")
}

fn eval_source(run: &RunManifest, data: &str) -> Result<mrmp_core::data::GraphDataset> {
    let source = if data == "manifest" { run.config.data.as_str() } else { data };
    Ok(run::load_data(source, run.config.data_seed)?.1)
}

fn cmd_extrapolate<T: Real>(a: ExtrapolateArgs) -> Result<ExitCode> {
    let run = load_run(&a.checkpoint, a.manifest.as_ref())?;
    let model = read_checkpoint::<T>(&a.checkpoint)?;
    let p = run::prune(&model, &run.config, a.rate)?;
    if let Some(w) = &p.warning {
        eprintln!("warning: {w}");
    }
    let accuracy = match &a.data {
        Some(d) => Some(p.accuracy(&eval_source(&run, d)?)?),
        None => None,
    };
    if let Some(path) = &a.save {
        write_checkpoint(&p.model, path)?;
    }
    let summary = serde_json::json!({
        "rate": a.rate,
        "threshold": p.threshold,
        "observed_rate": p.observed_rate,
        "active_params": p.active,
        "prunable_params": p.prunable,
        "total_params": model.param_count(),
        "accuracy": accuracy,
        "warning": p.warning,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep<T: Real>(a: SweepArgs) -> Result<ExitCode> {
    let run = load_run(&a.checkpoint, a.manifest.as_ref())?;
    let model = read_checkpoint::<T>(&a.checkpoint)?;
    let data = eval_source(&run, a.data.as_deref().unwrap_or("manifest"))?;
    let rows = run::sweep(&model, &run.config, &a.rates.0, &data)?;
    let sink: Box<dyn std::io::Write> = match &a.out {
        Some(path) => Box::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["rate", "observed_rate", "accuracy"])?;
    for (rate, observed, acc) in rows {
        w.write_record([fmt_sig9(rate), fmt_sig9(observed), fmt_sig9(acc)])?;
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let report = run_gradcheck(&GradcheckOptions {
        seed: a.seed,
        tolerance: a.tolerance,
        inject_fault: a.inject_fault,
    })?;
    for r in &report.results {
        let verdict = if r.passed { "ok" } else { "FAIL" };
        println!("{:<28} {:.3e}  {verdict}", r.name, r.max_rel_error);
    }
    println!("max relative error {:.3e} (tolerance {:.0e})", report.max_rel_error(), report.tolerance);
    if report.passed() {
        return Ok(ExitCode::SUCCESS);
    }
    let names: Vec<&str> = report.failures().iter().map(|r| r.name).collect();
    eprintln!("gradient check failed: {}", names.join(", "));
    Ok(ExitCode::FAILURE)
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        seed: a.seed,
        classes: a.classes.unwrap_or(d.classes),
        sequences_per_class: a.per_class.unwrap_or(d.sequences_per_class),
        joints: a.joints.unwrap_or(d.joints),
        frames: a.frames.unwrap_or(d.frames),
        noise: a.noise.unwrap_or(d.noise),
        ..d
    };
    let seqs = synth_dataset(&spec)?;
    write_jsonl(&a.out, &seqs)?;
    println!("wrote {} sequences to {}", seqs.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}
