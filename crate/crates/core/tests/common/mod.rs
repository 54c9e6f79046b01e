#![allow(dead_code)]

use lodet::data::SynthConfig;
use lodet::detector::DetectorConfig;
use lodet::pipeline::{DatasetSource, ExperimentPlan};

/// A plan small enough to pretrain and run in seconds.
pub fn small_plan() -> ExperimentPlan {
    let mut plan = ExperimentPlan {
        shots: vec![1],
        ranks: vec![2, 4],
        seeds: vec![0, 1],
        epochs: 4,
        eval_interval: 2,
        draws: 1,
        detector: DetectorConfig {
            embed_dim: 16,
            hidden_dim: 32,
            n_proposals: 12,
            ..DetectorConfig::default()
        },
        source: DatasetSource::Synthetic(SynthConfig {
            n_images: 24,
            ..SynthConfig::source(1)
        }),
        target: DatasetSource::Synthetic(SynthConfig {
            n_images: 40,
            ..SynthConfig::target(2)
        }),
        ..ExperimentPlan::default()
    };
    plan.pretrain.epochs = 4;
    plan.pretrain.eval_interval = 2;
    plan
}
