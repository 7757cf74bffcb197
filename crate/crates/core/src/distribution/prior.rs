use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};

/// Closed-form target distribution for the latent weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TargetPrior {
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, std: f64 },
    Laplace { mean: f64, scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Uniform,
    Gaussian,
    Laplace,
}

impl PriorKind {
    pub const ALL: [PriorKind; 3] = [PriorKind::Uniform, PriorKind::Gaussian, PriorKind::Laplace];

    pub fn name(self) -> &'static str {
        match self {
            PriorKind::Uniform => "uniform",
            PriorKind::Gaussian => "gaussian",
            PriorKind::Laplace => "laplace",
        }
    }
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PriorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown prior {s:?}; expected one of uniform, gaussian, laplace")))
    }
}

impl TargetPrior {
    /// Default zero-centred prior of a given kind.
    pub fn default_for(kind: PriorKind) -> Self {
        match kind {
            PriorKind::Uniform => TargetPrior::Uniform { lo: -1.0, hi: 1.0 },
            PriorKind::Gaussian => TargetPrior::Gaussian { mean: 0.0, std: 0.5 },
            PriorKind::Laplace => TargetPrior::Laplace { mean: 0.0, scale: 0.35 },
        }
    }

    /// Builds a prior from its kind and two parameters
    /// (`lo,hi` / `mean,std` / `mean,scale`).
    pub fn from_params(kind: PriorKind, p0: f64, p1: f64) -> Result<Self> {
        let prior = match kind {
            PriorKind::Uniform => TargetPrior::Uniform { lo: p0, hi: p1 },
            PriorKind::Gaussian => TargetPrior::Gaussian { mean: p0, std: p1 },
            PriorKind::Laplace => TargetPrior::Laplace { mean: p0, scale: p1 },
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn kind(&self) -> PriorKind {
        match self {
            TargetPrior::Uniform { .. } => PriorKind::Uniform,
            TargetPrior::Gaussian { .. } => PriorKind::Gaussian,
            TargetPrior::Laplace { .. } => PriorKind::Laplace,
        }
    }

    pub fn params(&self) -> (f64, f64) {
        match *self {
            TargetPrior::Uniform { lo, hi } => (lo, hi),
            TargetPrior::Gaussian { mean, std } => (mean, std),
            TargetPrior::Laplace { mean, scale } => (mean, scale),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (p0, p1) = self.params();
        if !(p0.is_finite() && p1.is_finite()) {
            return Err(Error::domain(format!("non-finite prior parameters {self:?}")));
        }
        let ok = match *self {
            TargetPrior::Uniform { lo, hi } => hi > lo,
            TargetPrior::Gaussian { std, .. } => std > 0.0,
            TargetPrior::Laplace { scale, .. } => scale > 0.0,
        };
        if !ok {
            return Err(Error::domain(format!("invalid prior parameters {self:?}")));
        }
        Ok(())
    }

    /// Support Ω used for histogram grids: `[lo, hi]`, `mean ± 4·std`,
    /// `mean ± 8·scale`.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            TargetPrior::Uniform { lo, hi } => (lo, hi),
            TargetPrior::Gaussian { mean, std } => (mean - 4.0 * std, mean + 4.0 * std),
            TargetPrior::Laplace { mean, scale } => (mean - 8.0 * scale, mean + 8.0 * scale),
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match *self {
            TargetPrior::Uniform { lo, hi } => {
                if (lo..=hi).contains(&x) {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            TargetPrior::Gaussian { mean, std } => {
                let z = (x - mean) / std;
                (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
            }
            TargetPrior::Laplace { mean, scale } => (-(x - mean).abs() / scale).exp() / (2.0 * scale),
        }
    }

    /// Signed CDF `P(W ≤ x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            TargetPrior::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            TargetPrior::Gaussian { mean, std } => {
                0.5 * (1.0 + erf((x - mean) / (std * std::f64::consts::SQRT_2)))
            }
            TargetPrior::Laplace { mean, scale } => {
                let z = (x - mean) / scale;
                if z < 0.0 {
                    0.5 * z.exp()
                } else {
                    1.0 - 0.5 * (-z).exp()
                }
            }
        }
    }

    /// CDF of the magnitude: `P(|W| ≤ a)` for `a ≥ 0`.
    pub fn magnitude_cdf(&self, a: f64) -> f64 {
        if a <= 0.0 {
            return 0.0;
        }
        (self.cdf(a) - self.cdf(-a)).clamp(0.0, 1.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            TargetPrior::Uniform { lo, hi } => Uniform::new_inclusive(lo, hi)
                .expect("validated bounds")
                .sample(rng),
            TargetPrior::Gaussian { mean, std } => {
                Normal::new(mean, std).expect("validated std").sample(rng)
            }
            TargetPrior::Laplace { mean, scale } => {
                // inverse transform on u ∈ (-1/2, 1/2)
                let u: f64 = rng.random::<f64>() - 0.5;
                let tail = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
                mean - scale * u.signum() * tail.ln()
            }
        }
    }
}

impl std::fmt::Display for TargetPrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (p0, p1) = self.params();
        write!(f, "{}({p0},{p1})", self.kind().name())
    }
}
