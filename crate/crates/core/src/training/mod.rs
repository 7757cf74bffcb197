//! Single- and multi-rate magnitude-pruning training, baselines, evaluation
//! and extrapolation to unseen rates.

mod adam;
mod config;
mod engine;
mod eval;
mod report;

pub use adam::{adaptive_lr, Adam};
pub use config::{TrainConfig, DEFAULT_RATES};
pub use engine::{dense_train, l1_train, mp_baseline, mrmp_train, srmp_train};
pub use eval::{evaluate, evaluate_gate, extrapolate, macro_accuracy, magnitude_prune, predict, PrunedModel};
pub use report::{
    fmt_sig9, save_summary, save_train_log, write_train_log, EpochRecord, RateRecord, SummaryRow, TrainMode,
    TrainReport,
};
