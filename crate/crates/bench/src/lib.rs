//! Shared fixtures for the benchmarks.

use mrmp_core::data::{synth_task, GraphDataset};
use mrmp_core::distribution::{PriorKind, TargetPrior};
use mrmp_core::gcn::GcnConfig;
use mrmp_core::training::TrainConfig;

/// Training split of the standard synthetic task and the compact model for it.
pub fn task() -> (GraphDataset, GcnConfig) {
    let (train, _) = synth_task(1).expect("synthetic task");
    let model = GcnConfig::compact(train.nodes(), train.dim(), train.classes());
    (train, model)
}

/// One-epoch configuration with the benchmark histogram size.
pub fn one_epoch(rates: Vec<f64>) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        bins: 40,
        rates,
        prior: TargetPrior::default_for(PriorKind::Gaussian),
        ..TrainConfig::default()
    }
}
