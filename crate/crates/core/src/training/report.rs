use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Srmp,
    Mrmp,
    Mp,
    L1,
    Dense,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Srmp => "srmp",
            TrainMode::Mrmp => "mrmp",
            TrainMode::Mp => "mp",
            TrainMode::L1 => "l1",
            TrainMode::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub rate: f64,
    pub threshold: f64,
    pub ce_loss: f64,
    pub observed_rate: f64,
}

/// Metrics of one epoch (epoch 0 holds the metrics before any update).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Summed cross-entropies plus the weighted regularizer.
    pub total_loss: f64,
    pub kld: f64,
    pub lr: f64,
    pub sigma: f64,
    pub rates: Vec<RateRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub initial: EpochRecord,
    pub epochs: Vec<EpochRecord>,
    /// `(rate, accuracy)` on the training data with hard masks.
    pub final_accuracy: Vec<(f64, f64)>,
    pub wall_time_secs: f64,
    /// Wall time of each optimization epoch (updates and epoch metrics).
    pub epoch_secs: Vec<f64>,
}

impl TrainReport {
    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().unwrap_or(&self.initial)
    }

    pub fn all_finite(&self) -> bool {
        std::iter::once(&self.initial).chain(&self.epochs).all(|e| {
            [e.total_loss, e.kld, e.lr, e.sigma].iter().all(|v| v.is_finite())
                && e.rates.iter().all(|r| r.ce_loss.is_finite() && r.observed_rate.is_finite())
        }) && self.final_accuracy.iter().all(|(r, a)| r.is_finite() && a.is_finite())
    }
}

/// Decimal rendering with 9 significant digits (scientific outside
/// `[1e-5, 1e9)`).
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let exp = x.abs().log10().floor() as i32;
    // rounding can carry into the next decade
    let exp = if format!("{:.8e}", x.abs()).ends_with(&format!("e{}", exp + 1)) { exp + 1 } else { exp };
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.8e}")
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// One row per epoch per rate: `epoch, rate, ce_loss, kld, observed_rate, lr, sigma`.
pub fn write_train_log<W: Write>(report: &TrainReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "rate", "ce_loss", "kld", "observed_rate", "lr", "sigma"])?;
    for e in std::iter::once(&report.initial).chain(&report.epochs) {
        for r in &e.rates {
            w.write_record([
                e.epoch.to_string(),
                fmt_sig9(r.rate),
                fmt_sig9(r.ce_loss),
                fmt_sig9(e.kld),
                fmt_sig9(r.observed_rate),
                fmt_sig9(e.lr),
                fmt_sig9(e.sigma),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn save_train_log(report: &TrainReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_train_log(report, file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub rate: f64,
    pub accuracy: f64,
    pub params_active: usize,
}

pub fn save_summary(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(["rate", "accuracy", "params_active"])?;
    for r in rows {
        w.write_record([fmt_sig9(r.rate), fmt_sig9(r.accuracy), r.params_active.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}
