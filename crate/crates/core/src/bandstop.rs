//! Band-stop reparametrization of latent weights.
//!
//! Effective weights are `W = Ŵ ⊙ ψ_{a,σ}(Ŵ)` with
//!
//! ```text
//! ψ_{a,σ}(w) = 1 / (1 + σ · exp(σ · (a² − w²)))
//! ```
//!
//! `a` is the magnitude threshold and `σ` the sharpness. At `σ = 1` this is
//! `1 / (1 + exp(a² − w²))`; for every `σ`, `ψ(±a) = 1/(1+σ)`; as `σ → ∞` the
//! gate tends to the hard mask `1[|w| > a]`, which is what [`extract_mask`]
//! returns.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Geometric σ annealing: `σ(t) = σ₀ · g^t`, saturating at `σ_max`, with `g`
/// chosen so that `σ(epochs) = σ_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub sigma0: f64,
    pub sigma_max: f64,
    pub epochs: usize,
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        SigmaSchedule {
            sigma0: 1.0,
            sigma_max: 1e6,
            epochs: 2700,
        }
    }
}

impl SigmaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::domain(format!("sigma0 must be > 0, got {}", self.sigma0)));
        }
        if !(self.sigma_max >= self.sigma0 && self.sigma_max.is_finite()) {
            return Err(Error::domain(format!(
                "sigma_max ({}) must be finite and >= sigma0 ({})",
                self.sigma_max, self.sigma0
            )));
        }
        Ok(())
    }

    /// Per-epoch growth factor `g`.
    pub fn growth(&self) -> f64 {
        if self.epochs == 0 {
            return 1.0;
        }
        (self.sigma_max / self.sigma0).powf(1.0 / self.epochs as f64)
    }

    pub fn sigma_at(&self, epoch: usize) -> f64 {
        if epoch >= self.epochs {
            return self.sigma_max;
        }
        (self.sigma0 * self.growth().powi(epoch as i32)).min(self.sigma_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandStopConfig {
    pub threshold: f64,
    pub sigma: f64,
    pub schedule: SigmaSchedule,
}

impl BandStopConfig {
    pub fn new(threshold: f64, sigma: f64) -> Result<Self> {
        let cfg = BandStopConfig {
            threshold,
            sigma,
            schedule: SigmaSchedule::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(Error::domain(format!("threshold must be >= 0, got {}", self.threshold)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::domain(format!("sigma must be > 0, got {}", self.sigma)));
        }
        self.schedule.validate()
    }

    /// Same threshold, σ taken from the schedule at `epoch`.
    pub fn at_epoch(&self, epoch: usize) -> Self {
        BandStopConfig {
            sigma: self.schedule.sigma_at(epoch),
            ..*self
        }
    }
}

#[inline]
fn sigmoid<T: Real>(z: T) -> T {
    if -z.abs() < T::EXP_UNDERFLOW {
        return if z > T::zero() { T::one() } else { T::zero() };
    }
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// ψ_{a,σ}(w), evaluated as a logistic in `σ(w² − a²) − ln σ` so that large
/// σ never overflows.
#[inline]
pub fn psi<T: Real>(w: T, a: T, sigma: T) -> T {
    sigmoid(sigma * (w * w - a * a) - sigma.ln())
}

/// dψ/dw = 2σw · ψ(1 − ψ).
#[inline]
pub fn psi_derivative<T: Real>(w: T, a: T, sigma: T) -> T {
    let p = psi(w, a, sigma);
    T::of(2.0) * sigma * w * p * (T::one() - p)
}

pub fn band_stop(w: f64, cfg: &BandStopConfig) -> Result<f64> {
    if !w.is_finite() {
        return Err(Error::domain(format!("band_stop of non-finite weight {w}")));
    }
    Ok(psi(w, cfg.threshold, cfg.sigma))
}

/// Records `Ŵ ⊙ ψ_{a,σ}(Ŵ)` so that gradients reach the latent through both
/// factors.
pub fn reparametrize<T: Real>(tape: &mut Tape<T>, latent: Var, threshold: f64, sigma: f64) -> Result<Var> {
    let gate = tape.band_stop(latent, T::of(threshold), T::of(sigma));
    tape.hadamard(latent, gate)
}

/// Hard mask: 1 where `|ŵ| > a`, 0 otherwise (ties at `|ŵ| = a` are removed).
pub fn extract_mask<T: Real>(latent: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
    if !(threshold >= 0.0) {
        return Err(Error::domain(format!("mask threshold must be >= 0, got {threshold}")));
    }
    let a = T::of(threshold);
    let data = latent
        .data()
        .iter()
        .map(|w| if w.abs() > a { T::one() } else { T::zero() })
        .collect();
    Tensor::new(latent.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(a: f64, sigma: f64) -> BandStopConfig {
        BandStopConfig::new(a, sigma).unwrap()
    }

    #[test]
    fn value_at_threshold_is_one_over_one_plus_sigma() {
        for &(a, s) in &[(0.3, 1.0), (1.0, 100.0), (2.0, 1e6), (0.0, 7.0)] {
            let c = cfg(a, s);
            let want = 1.0 / (1.0 + s);
            assert!((band_stop(a, &c).unwrap() - want).abs() < 1e-15 * want.max(1e-300) + 1e-16);
            assert!((band_stop(-a, &c).unwrap() - want).abs() < 1e-16 + 1e-15 * want);
        }
    }

    #[test]
    fn unit_sigma_is_logistic_in_squared_gap() {
        // σ = 1: ψ(0) with a = 1 is 1 / (1 + e)
        let v = band_stop(0.0, &cfg(1.0, 1.0)).unwrap();
        assert!((v - 1.0 / (1.0 + std::f64::consts::E)).abs() < 1e-15);
    }

    #[test]
    fn large_magnitudes_pass() {
        let c = cfg(1.0, 100.0);
        assert!((band_stop(50.0, &c).unwrap() - 1.0).abs() < 1e-12);
        assert!((band_stop(-1e3, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_weight_is_domain_error() {
        assert!(matches!(band_stop(f64::NAN, &cfg(1.0, 1.0)), Err(Error::Domain(_))));
        assert!(matches!(band_stop(f64::INFINITY, &cfg(1.0, 1.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(BandStopConfig::new(-0.1, 1.0).is_err());
        assert!(BandStopConfig::new(0.1, 0.0).is_err());
    }

    #[test]
    fn reparametrize_cases() {
        let mut tape = Tape::<f64>::new();
        let z = tape.param(&Tensor::zeros(&[3]));
        let w = reparametrize(&mut tape, z, 1.0, 1e4).unwrap();
        assert!(tape.value(w).iter().all(|&v| v == 0.0));

        // two entries far on either side of a = 1 at σ = 1e4
        let x = tape.param(&Tensor::from_vec(vec![0.1, 2.0]));
        let w = reparametrize(&mut tape, x, 1.0, 1e4).unwrap();
        let psi_small = 1.0 / (1.0 + 1e4 * (1e4 * (1.0 - 0.01f64)).exp());
        assert!(tape.value(w)[0].abs() <= 0.1 * psi_small + 1e-300);
        assert!((tape.value(w)[1] - 2.0).abs() < 1e-12);

        // a = 0 with small σ leaves latents almost untouched
        let l = Tensor::from_vec(vec![-0.7, 0.2, 1.3]);
        let v = tape.param(&l);
        let w = reparametrize(&mut tape, v, 0.0, 1e-6).unwrap();
        for (got, want) in tape.value(w).iter().zip(l.data()) {
            assert!((got - want).abs() <= 2e-6 * want.abs());
        }
    }

    #[test]
    fn schedule_examples() {
        let s = SigmaSchedule {
            sigma0: 1.0,
            sigma_max: 1e6,
            epochs: 2700,
        };
        assert_eq!(s.sigma_at(0), 1.0);
        // g = 1e6^(1/2700)
        assert!((s.growth() - 1.005130).abs() < 1e-6);
        assert!((s.sigma_at(2700) - 1e6).abs() < 1e-6);
        assert_eq!(s.sigma_at(10_000), 1e6);
        let mut prev = 0.0;
        for e in 0..=2800 {
            let v = s.sigma_at(e);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn mask_examples() {
        let l = Tensor::<f64>::from_vec(vec![0.1, 0.9, -0.5, 0.0]);
        assert_eq!(extract_mask(&l, 0.5).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(extract_mask(&l, 0.0).unwrap().data(), &[1.0, 1.0, 1.0, 0.0]);
        assert!(extract_mask(&l, -1.0).is_err());
    }

    #[test]
    fn hard_limit_at_large_sigma() {
        let a = 0.8;
        let c = cfg(a, 1e8);
        let mut w: f64 = -3.0;
        while w <= 3.0 {
            if (w.abs() - a).abs() > 0.01 {
                let hard = if w.abs() > a { 1.0 } else { 0.0 };
                assert!((band_stop(w, &c).unwrap() - hard).abs() < 1e-3, "w={w}");
            }
            w += 1e-3;
        }
    }

    proptest! {
        #[test]
        fn psi_is_even(w in -5.0f64..5.0, a in 0.0f64..3.0, s in 1e-3f64..1e6) {
            prop_assert_eq!(psi(w, a, s), psi(-w, a, s));
        }

        #[test]
        fn psi_increasing_in_magnitude(w1 in 0.0f64..2.0, dw in 1e-3f64..0.5, a in 0.0f64..2.0, s in 1e-2f64..4.0) {
            prop_assert!(psi(w1 + dw, a, s) > psi(w1, a, s));
        }

        #[test]
        fn psi_decreasing_in_sigma_below_threshold(frac in 0.0f64..0.99, a in 0.1f64..1.5, s in 1e-2f64..10.0, ds in 1e-2f64..5.0) {
            let w = frac * a;
            prop_assert!(psi(w, a, s * (1.0 + ds)) < psi(w, a, s));
        }

        #[test]
        fn mask_nested(vals in proptest::collection::vec(-3.0f64..3.0, 1..50), a1 in 0.0f64..2.0, da in 0.0f64..1.0) {
            let t = Tensor::from_vec(vals);
            let m1 = extract_mask(&t, a1).unwrap();
            let m2 = extract_mask(&t, a1 + da).unwrap();
            for (x, y) in m2.data().iter().zip(m1.data()) {
                prop_assert!(x <= y);
            }
        }
    }
}
