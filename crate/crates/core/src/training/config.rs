use serde::{Deserialize, Serialize};

use crate::bandstop::SigmaSchedule;
use crate::distribution::{PriorKind, TargetPrior, DEFAULT_BINS};
use crate::error::{Error, Result};

/// The eleven rates trained jointly by default.
pub const DEFAULT_RATES: [f64; 11] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95, 0.98];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the KLD term.
    pub lambda: f64,
    /// Strictly increasing rates in `[0, 1)`.
    pub rates: Vec<f64>,
    pub prior: TargetPrior,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub seed: u64,
    pub bins: usize,
    pub sigma0: f64,
    pub sigma_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 10.0,
            rates: DEFAULT_RATES.to_vec(),
            prior: TargetPrior::default_for(PriorKind::Gaussian),
            epochs: 2700,
            batch_size: 32,
            lr0: 1e-2,
            seed: 0,
            bins: DEFAULT_BINS,
            sigma0: 1.0,
            sigma_max: 1e6,
        }
    }
}

fn invalid(field: &str, message: String) -> Error {
    Error::Validation {
        field: field.into(),
        message,
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> SigmaSchedule {
        SigmaSchedule {
            sigma0: self.sigma0,
            sigma_max: self.sigma_max,
            epochs: self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() {
            return Err(invalid("rates", "at least one rate is required".into()));
        }
        if let Some(r) = self.rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(invalid("rates", format!("{r} is outside [0, 1)")));
        }
        if self.rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("rates", format!("{:?} is not strictly increasing", self.rates)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda", format!("must be finite and >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(invalid("lr0", format!("must be > 0, got {}", self.lr0)));
        }
        if self.bins < 2 {
            return Err(invalid("bins", format!("need at least 2 bins, got {}", self.bins)));
        }
        self.prior.validate()?;
        self.schedule().validate()
    }
}
