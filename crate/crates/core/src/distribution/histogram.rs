//! Differentiable K-bin histogram of latent weights and the discrete KLD.

use serde::{Deserialize, Serialize};

use super::TargetPrior;
use crate::autodiff::{Real, Tape, Var};
use crate::error::{Error, Result};

/// Smoothing added to both sides of the log ratio in [`kld`].
pub const KLD_EPS: f64 = 1e-8;

pub const DEFAULT_BINS: usize = 100;

/// Bin centers `q_k` over the prior support and kernel widths
/// `β_k = (q_{k+1} − q_k)/2` (`β_K = β_{K−1}`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    centers: Vec<f64>,
    widths: Vec<f64>,
}

impl BinGrid {
    pub fn from_centers(centers: Vec<f64>) -> Result<Self> {
        if centers.len() < 2 {
            return Err(Error::domain(format!("a grid needs K >= 2 bins, got {}", centers.len())));
        }
        if centers.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::domain("grid centers must be strictly increasing"));
        }
        let mut widths: Vec<f64> = centers.windows(2).map(|w| 0.5 * (w[1] - w[0])).collect();
        widths.push(*widths.last().expect("K >= 2"));
        Ok(BinGrid { centers, widths })
    }

    pub fn bins(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    /// Bin `k` covers `[q_k − β_k, q_k + β_k]`; consecutive bins tile the line
    /// between `q_1 − β_1` and `q_K + β_K`.
    pub fn edges(&self, k: usize) -> (f64, f64) {
        (self.centers[k] - self.widths[k], self.centers[k] + self.widths[k])
    }
}

/// Uniform grid of `bins` centers spanning the prior's support.
pub fn make_grid(prior: &TargetPrior, bins: usize) -> Result<BinGrid> {
    if bins < 2 {
        return Err(Error::domain(format!("a grid needs K >= 2 bins, got {bins}")));
    }
    prior.validate()?;
    let (lo, hi) = prior.support();
    let step = (hi - lo) / (bins - 1) as f64;
    let mut centers: Vec<f64> = (0..bins).map(|k| lo + k as f64 * step).collect();
    centers[bins - 1] = hi;
    BinGrid::from_centers(centers)
}

/// Probability mass of the prior inside each bin, renormalized to sum to one.
pub fn discretize_prior(prior: &TargetPrior, grid: &BinGrid) -> Vec<f64> {
    let mut p: Vec<f64> = (0..grid.bins())
        .map(|k| {
            let (lo, hi) = grid.edges(k);
            (prior.cdf(hi) - prior.cdf(lo)).max(0.0)
        })
        .collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

/// Soft histogram `Q` of every entry of the given latents.
#[derive(Debug, Clone, Copy)]
pub struct SoftHistogram {
    /// Normalized bin probabilities (sum to one), shape `[K]`.
    pub probs: Var,
    /// Unnormalized mass `Σ_k Σ_i exp(−(w_i − q_k)²/β_k²)`.
    pub raw_total: f64,
    /// Number of weight entries that went into the histogram.
    pub count: usize,
}

impl SoftHistogram {
    /// Unnormalized partition sum per weight.
    pub fn partition_per_weight(&self) -> f64 {
        self.raw_total / self.count as f64
    }
}

pub fn soft_histogram<T: Real>(tape: &mut Tape<T>, latents: &[Var], grid: &BinGrid) -> Result<SoftHistogram> {
    let count: usize = latents.iter().map(|&v| tape.value(v).len()).sum();
    if count == 0 {
        return Err(Error::domain("empty parameter set"));
    }
    let centers: Vec<T> = grid.centers().iter().map(|&c| T::of(c)).collect();
    let widths: Vec<T> = grid.widths().iter().map(|&b| T::of(b)).collect();
    let raw = tape.soft_histogram(latents, &centers, &widths)?;
    let total = tape.sum(raw);
    let raw_total = tape.scalar(total).f64();
    if !(raw_total > 0.0) {
        return Err(Error::domain(
            "soft histogram has no mass: every weight lies far outside the grid",
        ));
    }
    let inv = tape.reciprocal(total);
    let probs = tape.mul_scalar(raw, inv)?;
    Ok(SoftHistogram {
        probs,
        raw_total,
        count,
    })
}

/// `Σ_k P_k · ln((P_k + ε)/(Q_k + ε))`, recorded on the tape as a function of `Q`.
pub fn kld<T: Real>(tape: &mut Tape<T>, target: &[f64], q: &SoftHistogram) -> Result<Var> {
    let k = tape.value(q.probs).len();
    if target.len() != k {
        return Err(Error::Dimension {
            op: "kld",
            lhs: vec![target.len()],
            rhs: vec![k],
        });
    }
    let eps = T::of(KLD_EPS);
    let offset: f64 = target.iter().map(|&p| p * (p + KLD_EPS).ln()).sum();
    let p = tape.constant_vec(vec![k], target.iter().map(|&v| T::of(v)).collect())?;
    let shifted = tape.add_const(q.probs, eps);
    let log_q = tape.ln(shifted);
    let cross = tape.hadamard(p, log_q)?;
    let cross = tape.sum(cross);
    let neg = tape.neg(cross);
    Ok(tape.add_const(neg, T::of(offset)))
}

/// Plain evaluation of the smoothed KLD between two probability vectors.
pub fn kld_value(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            op: "kld",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    Ok(p
        .iter()
        .zip(q)
        .map(|(&pk, &qk)| pk * ((pk + KLD_EPS) / (qk + KLD_EPS)).ln())
        .sum())
}
