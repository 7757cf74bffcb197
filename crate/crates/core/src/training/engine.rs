//! Optimization loops over shared latent weights.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::{adaptive_lr, Adam};
use super::config::TrainConfig;
use super::eval::{evaluate_gate, magnitude_prune};
use super::report::{EpochRecord, RateRecord, TrainMode, TrainReport};
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::data::GraphDataset;
use crate::distribution::{
    discretize_prior, kld, make_grid, observed_rate, quantile_threshold, soft_histogram, BinGrid,
};
use crate::error::{Error, Result};
use crate::gcn::{GcnModel, Gate};

/// What a training step minimizes.
#[derive(Debug, Clone, PartialEq)]
enum Objective {
    /// One rate, cross-entropy and λ·KLD on a single tape.
    Joint { threshold: f64, lambda: f64 },
    /// Σ_r cross-entropy (one tape per rate) plus λ·KLD on its own tape.
    Multi { thresholds: Vec<f64>, lambda: f64 },
    /// Cross-entropy at one soft threshold plus λ₁·Σ|ŵ|.
    L1 { threshold: f64, lambda1: f64 },
    /// Plain cross-entropy under a fixed hard threshold (0 = dense).
    Plain { threshold: f64 },
}

impl Objective {
    fn thresholds(&self) -> Vec<f64> {
        match self {
            Objective::Joint { threshold, .. } | Objective::L1 { threshold, .. } | Objective::Plain { threshold } => {
                vec![*threshold]
            }
            Objective::Multi { thresholds, .. } => thresholds.clone(),
        }
    }

    fn gate(threshold: f64, sigma: f64, soft: bool) -> Gate {
        if soft {
            Gate::Soft { threshold, sigma }
        } else {
            Gate::Hard { threshold }
        }
    }

    fn is_soft(&self) -> bool {
        !matches!(self, Objective::Plain { .. })
    }
}

/// Histogram grid and discretized prior, fixed for a whole run.
struct Regularizer {
    grid: BinGrid,
    target: Vec<f64>,
}

struct StepOutput<T> {
    ce: Vec<f64>,
    /// KLD value or the ℓ1 sum, depending on the objective.
    reg: f64,
    grads: Vec<Vec<T>>,
}

fn prunable_leaves<T: Real>(model: &GcnModel<T>, leaves: &[Var]) -> Vec<Var> {
    model
        .params()
        .iter()
        .zip(leaves)
        .filter(|(p, _)| p.prunable)
        .map(|(_, &v)| v)
        .collect()
}

fn cross_entropy_tape<T: Real>(
    model: &GcnModel<T>,
    x: &Tensor<T>,
    labels: &[usize],
    gate: Gate,
) -> Result<(Tape<T>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let input = tape.constant(x);
    let fwd = model.forward(&mut tape, input, gate)?;
    let ce = tape.softmax_cross_entropy(fwd.logits, labels)?;
    Ok((tape, fwd.params, ce))
}

fn kld_tape<T: Real>(model: &GcnModel<T>, reg: &Regularizer, lambda: f64) -> Result<(f64, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let mut leaves = Vec::new();
    let mut slots = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        if p.prunable {
            leaves.push(tape.param(&p.value));
            slots.push(i);
        }
    }
    let q = soft_histogram(&mut tape, &leaves, &reg.grid)?;
    let d = kld(&mut tape, &reg.target, &q)?;
    let value = tape.scalar(d).f64();
    let weighted = tape.scale(d, T::of(lambda));
    tape.backward(weighted)?;
    let mut grads: Vec<Vec<T>> = model.params().iter().map(|p| vec![T::zero(); p.value.len()]).collect();
    for (&slot, &leaf) in slots.iter().zip(&leaves) {
        grads[slot] = tape.grad_or_zeros(leaf);
    }
    Ok((value, grads))
}

fn step_gradients<T: Real>(
    model: &GcnModel<T>,
    objective: &Objective,
    reg: Option<&Regularizer>,
    x: &Tensor<T>,
    labels: &[usize],
    sigma: f64,
) -> Result<StepOutput<T>> {
    match objective {
        Objective::Joint { threshold, lambda } => {
            let reg = reg.expect("band objectives carry a regularizer");
            let (mut tape, leaves, ce) = cross_entropy_tape(model, x, labels, Gate::Soft { threshold: *threshold, sigma })?;
            let latents = prunable_leaves(model, &leaves);
            let q = soft_histogram(&mut tape, &latents, &reg.grid)?;
            let d = kld(&mut tape, &reg.target, &q)?;
            let weighted = tape.scale(d, T::of(*lambda));
            let total = tape.add(ce, weighted)?;
            tape.backward(total)?;
            Ok(StepOutput {
                ce: vec![tape.scalar(ce).f64()],
                reg: tape.scalar(d).f64(),
                grads: leaves.iter().map(|&v| tape.grad_or_zeros(v)).collect(),
            })
        }
        Objective::Multi { thresholds, lambda } => {
            let reg = reg.expect("band objectives carry a regularizer");
            // per-rate passes read the same latents and fill disjoint buffers
            let per_rate = thresholds
                .par_iter()
                .map(|&a| {
                    let (mut tape, leaves, ce) = cross_entropy_tape(model, x, labels, Gate::Soft { threshold: a, sigma })?;
                    tape.backward(ce)?;
                    let grads: Vec<Vec<T>> = leaves.iter().map(|&v| tape.grad_or_zeros(v)).collect();
                    Ok((tape.scalar(ce).f64(), grads))
                })
                .collect::<Result<Vec<_>>>()?;
            let (kld_value, mut grads) = kld_tape(model, reg, *lambda)?;
            let mut ce = Vec::with_capacity(per_rate.len());
            for (c, g) in &per_rate {
                ce.push(*c);
                for (acc, part) in grads.iter_mut().zip(g) {
                    for (a, &v) in acc.iter_mut().zip(part) {
                        *a = *a + v;
                    }
                }
            }
            Ok(StepOutput { ce, reg: kld_value, grads })
        }
        Objective::L1 { threshold, lambda1 } => {
            let (mut tape, leaves, ce) = cross_entropy_tape(model, x, labels, Gate::Soft { threshold: *threshold, sigma })?;
            let mut penalty = None;
            for v in prunable_leaves(model, &leaves) {
                let a = tape.abs(v);
                let s = tape.sum(a);
                penalty = Some(match penalty {
                    None => s,
                    Some(p) => tape.add(p, s)?,
                });
            }
            let penalty = penalty.ok_or_else(|| Error::domain("model has no prunable weights"))?;
            let weighted = tape.scale(penalty, T::of(*lambda1));
            let total = tape.add(ce, weighted)?;
            tape.backward(total)?;
            Ok(StepOutput {
                ce: vec![tape.scalar(ce).f64()],
                reg: tape.scalar(penalty).f64(),
                grads: leaves.iter().map(|&v| tape.grad_or_zeros(v)).collect(),
            })
        }
        Objective::Plain { threshold } => {
            // exact zeros left by magnitude pruning stay masked and receive no gradient
            let (mut tape, leaves, ce) = cross_entropy_tape(model, x, labels, Gate::Hard { threshold: *threshold })?;
            tape.backward(ce)?;
            Ok(StepOutput {
                ce: vec![tape.scalar(ce).f64()],
                reg: 0.0,
                grads: leaves.iter().map(|&v| tape.grad_or_zeros(v)).collect(),
            })
        }
    }
}

fn regularizer_weight(objective: &Objective) -> f64 {
    match objective {
        Objective::Joint { lambda, .. } | Objective::Multi { lambda, .. } => *lambda,
        Objective::L1 { lambda1, .. } => *lambda1,
        Objective::Plain { .. } => 0.0,
    }
}

/// Whole-dataset metrics without any update.
fn measure<T: Real>(
    model: &GcnModel<T>,
    objective: &Objective,
    reg: Option<&Regularizer>,
    data: &GraphDataset,
    rates: &[f64],
    sigma: f64,
) -> Result<(Vec<f64>, f64)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, labels) = data.batch::<T>(&idx)?;
    let thresholds = objective.thresholds();
    let mut ce = Vec::with_capacity(rates.len());
    for &a in &thresholds {
        let gate = if objective.is_soft() {
            Objective::gate(a, sigma, true)
        } else {
            Gate::Hard { threshold: a }
        };
        let mut tape = Tape::new();
        let input = tape.constant(&x);
        let fwd = model.forward(&mut tape, input, gate)?;
        let loss = tape.softmax_cross_entropy(fwd.logits, &labels)?;
        ce.push(tape.scalar(loss).f64());
    }
    let reg_value = match (objective, reg) {
        (Objective::L1 { .. }, _) => model
            .latents()
            .iter()
            .flat_map(|t| t.data())
            .map(|w| w.abs().f64())
            .sum(),
        (_, Some(r)) => {
            let mut tape = Tape::new();
            let leaves: Vec<Var> = model.latents().iter().map(|t| tape.constant(t)).collect();
            let q = soft_histogram(&mut tape, &leaves, &r.grid)?;
            let d = kld(&mut tape, &r.target, &q)?;
            tape.scalar(d).f64()
        }
        _ => 0.0,
    };
    Ok((ce, reg_value))
}

struct Run<'a> {
    mode: TrainMode,
    objective: Objective,
    /// Rates reported (one per threshold).
    rates: Vec<f64>,
    cfg: &'a TrainConfig,
    epochs: usize,
}

fn record<T: Real>(
    model: &GcnModel<T>,
    run: &Run,
    epoch: usize,
    ce: &[f64],
    reg: f64,
    lr: f64,
    sigma: f64,
) -> Result<EpochRecord> {
    let thresholds = run.objective.thresholds();
    let latents = model.latents();
    let rates = run
        .rates
        .iter()
        .zip(&thresholds)
        .zip(ce)
        .map(|((&rate, &threshold), &ce_loss)| {
            Ok(RateRecord {
                rate,
                threshold,
                ce_loss,
                observed_rate: observed_rate(&latents, threshold)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total_loss = ce.iter().sum::<f64>() + regularizer_weight(&run.objective) * reg;
    Ok(EpochRecord {
        epoch,
        total_loss,
        kld: reg,
        lr,
        sigma,
        rates,
    })
}

fn check_inputs<T: Real>(model: &GcnModel<T>, data: &GraphDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::domain("training on empty data"));
    }
    let cfg = model.config();
    if data.nodes() != cfg.nodes || data.dim() != cfg.in_channels || data.classes() > cfg.classes {
        return Err(Error::Dimension {
            op: "train data vs model",
            lhs: vec![data.nodes(), data.dim(), data.classes()],
            rhs: vec![cfg.nodes, cfg.in_channels, cfg.classes],
        });
    }
    Ok(())
}

fn run_loop<T: Real>(model: &mut GcnModel<T>, data: &GraphDataset, run: Run) -> Result<TrainReport> {
    let start = Instant::now();
    let cfg = run.cfg;
    cfg.validate()?;
    check_inputs(model, data)?;
    let reg = if matches!(run.objective, Objective::Joint { .. } | Objective::Multi { .. }) {
        let grid = make_grid(&cfg.prior, cfg.bins)?;
        let target = discretize_prior(&cfg.prior, &grid);
        Some(Regularizer { grid, target })
    } else {
        None
    };
    let schedule = crate::bandstop::SigmaSchedule {
        epochs: run.epochs,
        ..cfg.schedule()
    };

    let (ce0, reg0) = measure(model, &run.objective, reg.as_ref(), data, &run.rates, schedule.sigma_at(0))?;
    let initial = record(model, &run, 0, &ce0, reg0, cfg.lr0, schedule.sigma_at(0))?;

    let sizes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
    let mut adam = Adam::<T>::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = cfg.batch_size.min(data.len());
    let mut lr = cfg.lr0;
    let mut history = Vec::with_capacity(run.epochs);
    let mut epochs = Vec::with_capacity(run.epochs);
    let mut epoch_secs = Vec::with_capacity(run.epochs);

    for epoch in 1..=run.epochs {
        let tick = Instant::now();
        let sigma = schedule.sigma_at(epoch - 1);
        order.shuffle(&mut rng);
        let mut ce_sum = vec![0.0; run.rates.len()];
        let mut reg_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(batch) {
            let (x, labels) = data.batch::<T>(chunk)?;
            let out = step_gradients(model, &run.objective, reg.as_ref(), &x, &labels, sigma)?;
            let loss: f64 = out.ce.iter().sum::<f64>() + regularizer_weight(&run.objective) * out.reg;
            if !loss.is_finite() || out.grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    message: format!("non-finite loss {loss} at step {steps}"),
                });
            }
            let mut views: Vec<&mut [T]> = model.params_mut().iter_mut().map(|p| p.value.data_mut()).collect();
            adam.step(&mut views, &out.grads, lr)?;
            for (acc, c) in ce_sum.iter_mut().zip(&out.ce) {
                *acc += c;
            }
            reg_sum += out.reg;
            steps += 1;
        }
        let ce: Vec<f64> = ce_sum.iter().map(|c| c / steps as f64).collect();
        let rec = record(model, &run, epoch, &ce, reg_sum / steps as f64, lr, sigma)?;
        history.push(rec.total_loss);
        epochs.push(rec);
        lr = adaptive_lr(lr, cfg.lr0, &history);
        epoch_secs.push(tick.elapsed().as_secs_f64());
    }

    let final_accuracy = run
        .rates
        .iter()
        .zip(run.objective.thresholds())
        .map(|(&rate, threshold)| Ok((rate, evaluate_gate(model, data, Gate::Hard { threshold })?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainReport {
        mode: run.mode,
        initial,
        epochs,
        final_accuracy,
        wall_time_secs: start.elapsed().as_secs_f64(),
        epoch_secs,
    })
}

/// Single-rate training: cross-entropy at `a(r)` plus λ·KLD.
pub fn srmp_train<T: Real>(model: &mut GcnModel<T>, data: &GraphDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.rates.len() != 1 {
        return Err(Error::Validation {
            field: "rates".into(),
            message: format!("single-rate training takes exactly one rate, got {}", cfg.rates.len()),
        });
    }
    let rate = cfg.rates[0];
    let run = Run {
        mode: TrainMode::Srmp,
        objective: Objective::Joint {
            threshold: quantile_threshold(&cfg.prior, rate)?,
            lambda: cfg.lambda,
        },
        rates: vec![rate],
        cfg,
        epochs: cfg.epochs,
    };
    run_loop(model, data, run)
}

/// Multi-rate training over one shared latent set: Σ_r cross-entropy at
/// `a(r)` plus a single λ·KLD term.
pub fn mrmp_train<T: Real>(model: &mut GcnModel<T>, data: &GraphDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let thresholds = cfg
        .rates
        .iter()
        .map(|&r| quantile_threshold(&cfg.prior, r))
        .collect::<Result<Vec<_>>>()?;
    let run = Run {
        mode: TrainMode::Mrmp,
        objective: Objective::Multi {
            thresholds,
            lambda: cfg.lambda,
        },
        rates: cfg.rates.clone(),
        cfg,
        epochs: cfg.epochs,
    };
    run_loop(model, data, run)
}

/// Unpruned training with raw latents.
pub fn dense_train<T: Real>(model: &mut GcnModel<T>, data: &GraphDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let run = Run {
        mode: TrainMode::Dense,
        objective: Objective::Plain { threshold: 0.0 },
        rates: vec![0.0],
        cfg,
        epochs: cfg.epochs,
    };
    run_loop(model, data, run)
}

/// Band-stop training at `a(r_target)` with an ℓ1 penalty instead of the
/// KLD. Nothing ties the final sparsity to `r_target`; reaching it takes a
/// search over `λ₁`.
pub fn l1_train<T: Real>(
    model: &mut GcnModel<T>,
    data: &GraphDataset,
    cfg: &TrainConfig,
    r_target: f64,
    lambda1: f64,
) -> Result<TrainReport> {
    if !(lambda1 >= 0.0 && lambda1.is_finite()) {
        return Err(Error::Validation {
            field: "lambda1".into(),
            message: format!("must be finite and >= 0, got {lambda1}"),
        });
    }
    let run = Run {
        mode: TrainMode::L1,
        objective: Objective::L1 {
            threshold: quantile_threshold(&cfg.prior, r_target)?,
            lambda1,
        },
        rates: vec![r_target],
        cfg,
        epochs: cfg.epochs,
    };
    run_loop(model, data, run)
}

/// Classic magnitude pruning of a trained dense model: removes the
/// `round(r·N)` smallest weights globally, then fine-tunes the survivors
/// under the frozen mask. Pruned entries are stored as exact zeros.
pub fn mp_baseline<T: Real>(
    model: &mut GcnModel<T>,
    data: &GraphDataset,
    rate: f64,
    finetune_epochs: usize,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    magnitude_prune(model, rate)?;
    let run = Run {
        mode: TrainMode::Mp,
        objective: Objective::Plain { threshold: 0.0 },
        rates: vec![rate],
        cfg,
        epochs: finetune_epochs,
    };
    run_loop(model, data, run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::distribution::{PriorKind, TargetPrior};
    use crate::gcn::GcnConfig;

    fn data() -> GraphDataset {
        let spec = SynthSpec {
            seed: 4,
            classes: 3,
            sequences_per_class: 12,
            joints: 6,
            frames: 16,
            ..SynthSpec::default()
        };
        GraphDataset::from_sequences(&synth_dataset(&spec).unwrap(), 4, 3, None).unwrap()
    }

    fn model(seed: u64) -> GcnModel<f64> {
        let cfg = GcnConfig {
            nodes: 6,
            in_channels: 12,
            projection: None,
            heads: 1,
            filters: 8,
            hidden: None,
            classes: 3,
        };
        GcnModel::build(cfg, seed).unwrap()
    }

    fn cfg(rates: Vec<f64>, epochs: usize) -> TrainConfig {
        TrainConfig {
            rates,
            epochs,
            batch_size: 12,
            bins: 30,
            sigma_max: 1e3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_reports_initial_metrics_only() {
        let d = data();
        let mut m = model(0);
        let before = m.clone();
        let r = srmp_train(&mut m, &d, &cfg(vec![0.8], 0)).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(r.initial.epoch, 0);
        assert_eq!(r.initial.rates.len(), 1);
        assert_eq!(m, before);
        assert!(r.all_finite());
    }

    #[test]
    fn srmp_needs_exactly_one_rate() {
        let d = data();
        assert!(srmp_train(&mut model(0), &d, &cfg(vec![0.5, 0.6], 1)).is_err());
    }

    #[test]
    fn deterministic_reports() {
        let d = data();
        let c = cfg(vec![0.5, 0.8], 3);
        let (mut a, mut b) = (model(1), model(1));
        let ra = mrmp_train(&mut a, &d, &c).unwrap();
        let rb = mrmp_train(&mut b, &d, &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epochs, rb.epochs);
        assert_eq!(ra.final_accuracy, rb.final_accuracy);
        assert_eq!(ra.epochs.len(), 3);
        assert!(ra.epochs.iter().all(|e| e.rates.len() == 2));
    }

    #[test]
    fn single_rate_multi_matches_joint_step() {
        let d = data();
        let c = TrainConfig {
            batch_size: d.len(),
            ..cfg(vec![0.8], 1)
        };
        let (mut a, mut b) = (model(2), model(2));
        srmp_train(&mut a, &d, &c).unwrap();
        mrmp_train(&mut b, &d, &c).unwrap();
        let start = model(2);
        for ((pa, pb), p0) in a.params().iter().zip(b.params()).zip(start.params()) {
            for ((x, y), z) in pa.value.data().iter().zip(pb.value.data()).zip(p0.value.data()) {
                assert!(((x - z) - (y - z)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn latent_count_independent_of_rate_set() {
        let d = data();
        let mut one = model(3);
        let mut many = model(3);
        mrmp_train(&mut one, &d, &cfg(vec![0.5], 1)).unwrap();
        mrmp_train(&mut many, &d, &cfg(vec![0.5, 0.7, 0.9], 1)).unwrap();
        assert_eq!(one.param_count(), many.param_count());
    }

    #[test]
    fn training_reduces_loss() {
        let d = data();
        let mut m = model(5);
        let c = TrainConfig {
            prior: TargetPrior::default_for(PriorKind::Gaussian),
            ..cfg(vec![0.5], 25)
        };
        let r = srmp_train(&mut m, &d, &c).unwrap();
        assert!(r.last().total_loss < r.initial.total_loss);
        assert!(r.all_finite());
        assert!(r.epochs.windows(2).all(|w| w[1].sigma >= w[0].sigma));
    }

    #[test]
    fn dense_training_learns_the_toy_task() {
        let d = data();
        let mut m = model(6);
        let r = dense_train(&mut m, &d, &cfg(vec![0.5], 40)).unwrap();
        assert!(r.final_accuracy[0].1 > 0.8, "{:?}", r.final_accuracy);
    }

    #[test]
    fn mp_keeps_mask_frozen() {
        let d = data();
        let mut m = model(7);
        dense_train(&mut m, &d, &cfg(vec![0.5], 5)).unwrap();
        let n = m.prunable_count();
        let r = mp_baseline(&mut m, &d, 0.9, 5, &cfg(vec![0.5], 5)).unwrap();
        let zeros = m.latents().iter().flat_map(|t| t.data()).filter(|w| **w == 0.0).count();
        assert_eq!(zeros, (0.9 * n as f64).round() as usize);
        assert_eq!(r.epochs.len(), 5);
        assert!(mp_baseline(&mut m, &d, 1.0, 1, &cfg(vec![0.5], 1)).is_err());

        let mut full = model(7);
        mp_baseline(&mut full, &d, 0.0, 1, &cfg(vec![0.5], 1)).unwrap();
        assert_eq!(full.active_count(0.0), n);
    }

    #[test]
    fn l1_pressure_raises_sparsity() {
        let d = data();
        let c = cfg(vec![0.5], 20);
        let (mut weak, mut strong) = (model(8), model(8));
        let a = quantile_threshold(&c.prior, 0.5).unwrap();
        l1_train(&mut weak, &d, &c, 0.5, 0.0).unwrap();
        l1_train(&mut strong, &d, &c, 0.5, 0.05).unwrap();
        let sw = observed_rate(&weak.latents(), a).unwrap();
        let ss = observed_rate(&strong.latents(), a).unwrap();
        assert!(ss >= sw, "{ss} < {sw}");
        assert!(l1_train(&mut weak, &d, &c, 0.5, -1.0).is_err());
    }

    #[test]
    fn mismatched_data_rejected() {
        let d = data();
        let cfg_big = GcnConfig {
            nodes: 7,
            ..*model(0).config()
        };
        let mut m = GcnModel::<f64>::build(cfg_big, 0).unwrap();
        assert!(srmp_train(&mut m, &d, &cfg(vec![0.5], 1)).is_err());
    }

    #[test]
    fn f32_training_runs() {
        let d = data();
        let mut m = model(9).cast::<f32>();
        let r = mrmp_train(&mut m, &d, &cfg(vec![0.5, 0.9], 2)).unwrap();
        assert!(r.all_finite());
    }
}
