//! Training, pruning and evaluation shared by the subcommands.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mrmp_core::autodiff::Real;
use mrmp_core::data::{
    load_jsonl, synth_task, GraphDataset, DEFAULT_CHUNKS, DEFAULT_NEIGHBORS, TASK_SPLIT_SEED, TASK_TEST_FRACTION,
};
use mrmp_core::gcn::{write_checkpoint, GcnConfig, GcnModel, Gate};
use mrmp_core::training::{
    dense_train, evaluate_gate, extrapolate, fmt_sig9, l1_train, magnitude_prune, mp_baseline, mrmp_train,
    save_summary, save_train_log, srmp_train, SummaryRow,
};

use crate::args::{Arch, Mode};
use crate::manifest::{RunConfig, RunManifest, CHECKPOINT_FILE, MANIFEST_FILE};

/// `(train, test)` split of a data source.
pub fn load_data(source: &str, seed: u64) -> Result<(GraphDataset, GraphDataset)> {
    if source == "synth" {
        return synth_task(seed).context("building the synthetic task");
    }
    let seqs = load_jsonl(source).with_context(|| format!("loading {source}"))?;
    let all = GraphDataset::from_sequences(&seqs, DEFAULT_CHUNKS, DEFAULT_NEIGHBORS, None)
        .with_context(|| format!("building graphs from {source}"))?;
    Ok(all.split(TASK_TEST_FRACTION, TASK_SPLIT_SEED)?)
}

pub fn model_config(arch: Arch, data: &GraphDataset) -> Result<GcnConfig> {
    let cfg = match arch {
        Arch::Compact => return Ok(GcnConfig::compact(data.nodes(), data.dim(), data.classes())),
        Arch::Sbu => GcnConfig::sbu(),
        Arch::Fpha => GcnConfig::fpha(),
    };
    if (cfg.nodes, cfg.in_channels, cfg.classes) != (data.nodes(), data.dim(), data.classes()) {
        bail!(
            "{arch:?} expects {} nodes x {} channels and {} classes, the data has {} x {} and {}",
            cfg.nodes,
            cfg.in_channels,
            cfg.classes,
            data.nodes(),
            data.dim(),
            data.classes()
        );
    }
    Ok(cfg)
}

/// A checkpoint masked at one rate.
pub struct Pruned<T> {
    pub model: GcnModel<T>,
    /// Prior quantile `a(r)`, absent for magnitude-ranked modes.
    pub threshold: Option<f64>,
    pub observed_rate: f64,
    pub active: usize,
    pub prunable: usize,
    pub warning: Option<String>,
}

impl<T: Real> Pruned<T> {
    pub fn accuracy(&self, data: &GraphDataset) -> Result<f64> {
        Ok(evaluate_gate(&self.model, data, Gate::Identity)?)
    }
}

/// Band-stop checkpoints are cut at the prior quantile; dense and mp
/// checkpoints are ranked by magnitude.
pub fn prune<T: Real>(model: &GcnModel<T>, config: &RunConfig, rate: f64) -> Result<Pruned<T>> {
    if config.mode.band_stop() {
        let p = extrapolate(model, &config.train.prior, rate, Some(config.trained_range()))?;
        return Ok(Pruned {
            model: p.model,
            threshold: Some(p.threshold),
            observed_rate: p.observed_rate,
            active: p.active,
            prunable: p.prunable,
            warning: p.warning,
        });
    }
    let mut pruned = model.clone();
    magnitude_prune(&mut pruned, rate)?;
    let prunable = pruned.prunable_count();
    let active = pruned.active_count(0.0);
    let (lo, hi) = config.trained_range();
    let warning = (config.mode == Mode::Mp && (rate < lo || rate > hi))
        .then(|| format!("rate {rate} lies outside the fine-tuned range [{lo}, {hi}]"));
    Ok(Pruned {
        model: pruned,
        threshold: None,
        observed_rate: 1.0 - active as f64 / prunable as f64,
        active,
        prunable,
        warning,
    })
}

pub fn train<T: Real>(config: &RunConfig, out: &Path) -> Result<()> {
    let (train_set, test_set) = load_data(&config.data, config.data_seed)?;
    if model_config(config.arch, &train_set)? != config.model {
        bail!("model config does not match the data");
    }
    let cfg = &config.train;
    let mut model = GcnModel::<T>::build(config.model, cfg.seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let report = match config.mode {
        Mode::Mrmp => mrmp_train(&mut model, &train_set, cfg)?,
        Mode::Srmp => srmp_train(&mut model, &train_set, cfg)?,
        Mode::L1 => l1_train(&mut model, &train_set, cfg, cfg.rates[0], config.lambda1)?,
        Mode::Dense => dense_train(&mut model, &train_set, cfg)?,
        Mode::Mp => {
            let dense = dense_train(&mut model, &train_set, cfg)?;
            save_train_log(&dense, out.join("dense_log.csv"))?;
            mp_baseline(&mut model, &train_set, cfg.rates[0], config.finetune_epochs, cfg)?
        }
    };
    if !report.all_finite() {
        bail!("training produced non-finite metrics");
    }
    write_checkpoint(&model, out.join(CHECKPOINT_FILE))?;
    save_train_log(&report, out.join("train_log.csv"))?;

    let mut rows = Vec::with_capacity(cfg.rates.len());
    for &rate in &cfg.rates {
        let p = prune(&model, config, rate)?;
        rows.push(SummaryRow {
            rate,
            accuracy: p.accuracy(&test_set)?,
            params_active: p.active,
        });
    }
    save_summary(&rows, out.join("summary.csv"))?;
    RunManifest::new(config.clone(), out.to_path_buf()).save(&out.join(MANIFEST_FILE))?;

    println!(
        "{} run: {} epochs in {:.1}s, {} of {} parameters prunable",
        config.mode.name(),
        report.epochs.len(),
        report.wall_time_secs,
        model.prunable_count(),
        model.param_count()
    );
    for r in &rows {
        println!(
            "rate {}  test accuracy {}  active {}",
            fmt_sig9(r.rate),
            fmt_sig9(r.accuracy),
            r.params_active
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Rows `(rate, observed_rate, accuracy)` over a rate grid.
pub fn sweep<T: Real>(
    model: &GcnModel<T>,
    config: &RunConfig,
    rates: &[f64],
    data: &GraphDataset,
) -> Result<Vec<(f64, f64, f64)>> {
    rates
        .iter()
        .map(|&rate| {
            let p = prune(model, config, rate)?;
            Ok((rate, p.observed_rate, p.accuracy(data)?))
        })
        .collect()
}

