//! Synthetic multi-task benchmark: task generation, training, evaluation,
//! few-shot transfer and diagnostic exports.

pub mod diagnostics;
pub mod export;
pub mod fewshot;
pub mod tasks;
pub mod train;

pub use tasks::{generate_tasks, Sample, Suite, SyntheticTask};
pub use train::{evaluate, train, MetricRecord, RunMetrics, TrainOptions};

use crate::config::RunConfig;
use crate::error::Result;
use crate::transformer::Model;

/// A trained model with the data and metrics that produced it.
pub struct RunOutcome {
    pub model: Model,
    pub suite: Suite,
    pub metrics: RunMetrics,
}

pub fn build_suite(config: &RunConfig, seed: u64) -> Result<Suite> {
    generate_tasks(
        &config.backbone,
        &config.tasks,
        config.adapter.rank,
        config.sampling_scheme(),
        seed,
    )
}

pub fn build_model(config: &RunConfig, seed: u64) -> Result<Model> {
    Model::build(&config.backbone, &config.adapter_spec(), seed)
}

pub fn train_options(config: &RunConfig, seed: u64) -> TrainOptions {
    TrainOptions {
        training: config.training.clone(),
        sign: config.ablations.contrastive_sign(),
        seed,
    }
}

/// Generate the suite, build the model and train it for one seed.
pub fn run(config: &RunConfig, seed: u64) -> Result<RunOutcome> {
    config.validate()?;
    let suite = build_suite(config, seed)?;
    let mut model = build_model(config, seed)?;
    let metrics = train(&suite, &mut model, &train_options(config, seed))?;
    Ok(RunOutcome { model, suite, metrics })
}
