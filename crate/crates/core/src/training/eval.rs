use crate::autodiff::Real;
use crate::data::GraphDataset;
use crate::distribution::{observed_rate, quantile_threshold, TargetPrior};
use crate::error::{Error, Result};
use crate::gcn::{GcnModel, Gate};

const EVAL_BATCH: usize = 256;

/// Per-class accuracy averaged over the classes present in `labels`.
pub fn macro_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::domain("accuracy of an empty dataset"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Dimension {
            op: "macro_accuracy",
            lhs: vec![predictions.len()],
            rhs: vec![labels.len()],
        });
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        totals[l] += 1;
        hits[l] += usize::from(p == l);
    }
    let present: Vec<f64> = hits
        .iter()
        .zip(&totals)
        .filter(|(_, &t)| t > 0)
        .map(|(&h, &t)| h as f64 / t as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Arg-max class of every sample.
pub fn predict<T: Real>(model: &GcnModel<T>, data: &GraphDataset, gate: Gate) -> Result<Vec<usize>> {
    let classes = model.config().classes;
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = data.batch::<T>(chunk)?;
        let logits = model.logits(&x, gate)?;
        for row in logits.data().chunks(classes) {
            let best = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            out.push(best.0);
        }
    }
    Ok(out)
}

/// Macro accuracy of the model under `gate`.
pub fn evaluate_gate<T: Real>(model: &GcnModel<T>, data: &GraphDataset, gate: Gate) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("evaluation on empty data"));
    }
    macro_accuracy(&predict(model, data, gate)?, data.labels())
}

/// Macro accuracy with the hard mask at `a(r)`.
pub fn evaluate<T: Real>(model: &GcnModel<T>, data: &GraphDataset, prior: &TargetPrior, rate: f64) -> Result<f64> {
    let threshold = quantile_threshold(prior, rate)?;
    evaluate_gate(model, data, Gate::Hard { threshold })
}

/// Inference-ready network at one pruning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedModel<T> {
    pub rate: f64,
    pub threshold: f64,
    /// Latents with every `|ŵ| ≤ a` entry set to zero.
    pub model: GcnModel<T>,
    pub observed_rate: f64,
    pub active: usize,
    pub prunable: usize,
    /// Set when `rate` lies outside the trained range.
    pub warning: Option<String>,
}

impl<T: Real> PrunedModel<T> {
    pub fn evaluate(&self, data: &GraphDataset) -> Result<f64> {
        evaluate_gate(&self.model, data, Gate::Identity)
    }
}

/// Masks a trained model at an arbitrary rate without any gradient step.
pub fn extrapolate<T: Real>(
    model: &GcnModel<T>,
    prior: &TargetPrior,
    rate: f64,
    trained: Option<(f64, f64)>,
) -> Result<PrunedModel<T>> {
    let threshold = quantile_threshold(prior, rate)?;
    let warning = trained.and_then(|(lo, hi)| {
        (rate < lo || rate > hi).then(|| {
            format!("rate {rate} lies outside the trained range [{lo}, {hi}]; extrapolating beyond the continuum")
        })
    });
    let observed = observed_rate(&model.latents(), threshold)?;
    let mut pruned = model.clone();
    let a = T::of(threshold);
    for p in pruned.params_mut().iter_mut().filter(|p| p.prunable) {
        for w in p.value.data_mut() {
            if w.abs() <= a {
                *w = T::zero();
            }
        }
    }
    Ok(PrunedModel {
        rate,
        threshold,
        observed_rate: observed,
        active: model.active_count(threshold),
        prunable: model.prunable_count(),
        model: pruned,
        warning,
    })
}

/// Zeroes the `round(r·N)` smallest-magnitude prunable weights (global
/// ranking, ties by position). Returns the number removed.
pub fn magnitude_prune<T: Real>(model: &mut GcnModel<T>, rate: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::domain(format!("pruning rate must lie in [0, 1), got {rate}")));
    }
    let mut order: Vec<(T, usize, usize)> = Vec::new();
    for (i, p) in model.params().iter().enumerate().filter(|(_, p)| p.prunable) {
        order.extend(p.value.data().iter().enumerate().map(|(j, w)| (w.abs(), i, j)));
    }
    let remove = (rate * order.len() as f64).round() as usize;
    order.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("finite weights").then((x.1, x.2).cmp(&(y.1, y.2))));
    for &(_, i, j) in &order[..remove] {
        model.params_mut()[i].value.data_mut()[j] = T::zero();
    }
    Ok(remove)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcn::GcnConfig;

    #[test]
    fn macro_accuracy_cases() {
        assert_eq!(macro_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        let labels = [0, 1, 2, 0, 1, 2];
        assert!((macro_accuracy(&[1; 6], &labels).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // 1:9 imbalance, always class 0: micro 0.1, macro 0.5
        let mut labels = vec![1; 9];
        labels.insert(0, 0);
        assert_eq!(macro_accuracy(&[0; 10], &labels).unwrap(), 0.5);
        assert!(macro_accuracy(&[], &[]).is_err());
    }

    fn cfg() -> GcnConfig {
        GcnConfig {
            nodes: 3,
            in_channels: 3,
            projection: None,
            heads: 1,
            filters: 4,
            hidden: None,
            classes: 2,
        }
    }

    #[test]
    fn extrapolation_masks_and_warns() {
        let m = GcnModel::<f64>::build(cfg(), 0).unwrap();
        let prior = TargetPrior::Uniform { lo: -0.6, hi: 0.6 };
        let p0 = extrapolate(&m, &prior, 0.0, Some((0.5, 0.98))).unwrap();
        assert_eq!(p0.active, m.prunable_count());
        assert!(p0.warning.is_some());
        let p = extrapolate(&m, &prior, 0.7, Some((0.5, 0.98))).unwrap();
        assert!(p.warning.is_none());
        let zeros = p.model.latents().iter().flat_map(|t| t.data()).filter(|w| **w == 0.0).count();
        assert_eq!(zeros + p.active, p.prunable);
        assert!(extrapolate(&m, &prior, 0.999, Some((0.5, 0.98))).unwrap().warning.is_some());
        assert!(extrapolate(&m, &prior, 1.0, None).is_err());
    }

    #[test]
    fn magnitude_prune_removes_exact_fraction() {
        let mut m = GcnModel::<f64>::build(cfg(), 3).unwrap();
        let n = m.prunable_count();
        let removed = magnitude_prune(&mut m, 0.37).unwrap();
        assert_eq!(removed, (0.37 * n as f64).round() as usize);
        let zeros = m.latents().iter().flat_map(|t| t.data()).filter(|w| **w == 0.0).count();
        assert_eq!(zeros, removed);
        // survivors are never smaller than any removed weight
        let base = GcnModel::<f64>::build(cfg(), 3).unwrap();
        let mut cut = 0.0f64;
        let mut keep = f64::INFINITY;
        for (a, b) in base.latents().iter().zip(m.latents()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                if *y == 0.0 {
                    cut = cut.max(x.abs());
                } else {
                    keep = keep.min(x.abs());
                }
            }
        }
        assert!(cut <= keep);
        assert_eq!(magnitude_prune(&mut m.clone(), 0.0).unwrap(), 0);
        assert!(magnitude_prune(&mut m, 1.0).is_err());
    }
}
