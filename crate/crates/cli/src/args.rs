//! Value parsers for flags with their own grammar.

use std::str::FromStr;

use clap::ValueEnum;
use mrmp_core::distribution::PriorKind;
use serde::{Deserialize, Serialize};

/// Digits kept when stepping through a `start:stop:step` range, so that
/// `0.5:0.6:0.05` yields exactly the literals `0.5, 0.55, 0.6`.
const RATE_DECIMALS: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Srmp,
    Mrmp,
    Mp,
    L1,
    Dense,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Srmp => "srmp",
            Mode::Mrmp => "mrmp",
            Mode::Mp => "mp",
            Mode::L1 => "l1",
            Mode::Dense => "dense",
        }
    }

    /// Modes whose checkpoint stores band-stop latents pruned by the prior quantile.
    pub fn band_stop(self) -> bool {
        matches!(self, Mode::Srmp | Mode::Mrmp | Mode::L1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prior {
    Uniform,
    Gaussian,
    Laplace,
}

impl From<Prior> for PriorKind {
    fn from(p: Prior) -> Self {
        match p {
            Prior::Uniform => PriorKind::Uniform,
            Prior::Gaussian => PriorKind::Gaussian,
            Prior::Laplace => PriorKind::Laplace,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// 1 head, 16 filters, 32 hidden units, sized from the data.
    Compact,
    Sbu,
    Fpha,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

fn number(s: &str) -> Result<f64, String> {
    f64::from_str(s.trim()).map_err(|_| format!("{s:?} is not a number"))
}

fn snap(x: f64) -> f64 {
    (x * RATE_DECIMALS).round() / RATE_DECIMALS
}

/// Parses `start:stop:step,extra,...` into a strictly increasing rate list.
pub fn parse_rates(s: &str) -> Result<Vec<f64>, String> {
    let mut rates = Vec::new();
    for part in s.split(',').map(str::trim) {
        let fields: Vec<&str> = part.split(':').collect();
        match fields.as_slice() {
            [""] => return Err("empty rate entry".into()),
            [x] => rates.push(snap(number(x)?)),
            [start, stop, step] => {
                let (start, stop, step) = (number(start)?, number(stop)?, number(step)?);
                if !(step > 0.0 && step.is_finite()) {
                    return Err(format!("step in {part:?} must be positive"));
                }
                if !(stop >= start) {
                    return Err(format!("range {part:?} runs backwards"));
                }
                let n = ((stop - start) / step + 1e-9).floor() as usize;
                rates.extend((0..=n).map(|i| snap(start + i as f64 * step)));
            }
            _ => return Err(format!("{part:?} is neither a rate nor start:stop:step")),
        }
    }
    if let Some(r) = rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(format!("rate {r} is outside [0, 1)"));
    }
    if let Some(w) = rates.windows(2).find(|w| w[0] >= w[1]) {
        return Err(format!("rates must be strictly increasing, but {} is followed by {}", w[0], w[1]));
    }
    Ok(rates)
}

/// A parsed `--rates` value.
#[derive(Debug, Clone, PartialEq)]
pub struct Rates(pub Vec<f64>);

impl FromStr for Rates {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        parse_rates(s).map(Rates)
    }
}

/// Parses the two prior parameters `a,b`.
pub fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    match s.split(',').collect::<Vec<_>>().as_slice() {
        [a, b] => Ok((number(a)?, number(b)?)),
        _ => Err(format!("expected two comma-separated numbers, got {s:?}")),
    }
}
