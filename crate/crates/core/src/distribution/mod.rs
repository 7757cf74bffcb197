//! Target priors, soft histograms, the discrete KLD regularizer and the
//! magnitude-quantile pruning threshold `a(r)`.

mod histogram;
mod prior;

pub use histogram::{
    discretize_prior, kld, kld_value, make_grid, soft_histogram, BinGrid, SoftHistogram, DEFAULT_BINS,
    KLD_EPS,
};
pub use prior::{PriorKind, TargetPrior};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Threshold `a` such that the prior mass of `{|w| ≤ a}` equals `r`.
///
/// Solved by bisection on the magnitude CDF, so it works for any prior
/// parameters (including off-centre means).
pub fn quantile_threshold(prior: &TargetPrior, r: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::domain(format!("pruning rate must lie in [0, 1), got {r}")));
    }
    prior.validate()?;
    if r == 0.0 {
        return Ok(0.0);
    }
    let (lo, hi) = prior.support();
    let mut upper = lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    while prior.magnitude_cdf(upper) < r {
        upper *= 2.0;
        if !upper.is_finite() {
            return Err(Error::domain(format!("quantile {r} not reachable for {prior}")));
        }
    }
    let mut lower = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lower + upper);
        if mid <= lower || mid >= upper {
            break;
        }
        if prior.magnitude_cdf(mid) < r {
            lower = mid;
        } else {
            upper = mid;
        }
    }
    Ok(upper)
}

/// Fraction of all entries with `|ŵ| ≤ a`.
pub fn observed_rate<T: Real>(latents: &[&Tensor<T>], threshold: f64) -> Result<f64> {
    if !(threshold >= 0.0) {
        return Err(Error::domain(format!("threshold must be >= 0, got {threshold}")));
    }
    let total: usize = latents.iter().map(|t| t.len()).sum();
    if total == 0 {
        return Err(Error::domain("empty parameter set"));
    }
    let a = T::of(threshold);
    let pruned = latents
        .iter()
        .flat_map(|t| t.data())
        .filter(|w| w.abs() <= a)
        .count();
    Ok(pruned as f64 / total as f64)
}
