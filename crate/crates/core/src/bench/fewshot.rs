//! Few-shot transfer of a trained model to a new task.
//!
//! The model is rebuilt with one more task, every trained parameter is
//! copied over, and the new task's embedding rows are either drawn fresh or
//! copied from the most similar source task. The rank scaling keeps the
//! source task count so existing tasks produce exactly the same outputs.

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::bench::diagnostics::{cosine, pooled_representations};
use crate::bench::tasks::{generate_task, Sample, SyntheticTask};
use crate::bench::train::{accuracy, train_step};
use crate::config::{RunConfig, TaskSpec};
use crate::error::{Error, Result};
use crate::more::kaiming_rows;
use crate::optim::{warmup_linear, AdamW};
use crate::rng::{stream, Stream};
use crate::sampler::{BalancedSampler, TaskRegistry, WeightScheme};
use crate::transformer::Model;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    #[default]
    Kaiming,
    CopyNearest,
}

impl InitPolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "kaiming" => Some(Self::Kaiming),
            "copy_nearest" => Some(Self::CopyNearest),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotOptions {
    pub shots: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub policy: InitPolicy,
    /// Picks the shots and the fresh embedding rows.
    pub seed: u64,
    /// Candidate pool the shots are drawn from.
    pub pool_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotResult {
    pub shots: usize,
    pub seed: u64,
    pub policy: InitPolicy,
    /// Source task whose embedding was copied (copy_nearest only).
    pub copied_from: Option<usize>,
    pub initial_accuracy: f64,
    pub accuracy: f64,
}

/// Mean and per-seed results for one shot count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotSummary {
    pub shots: usize,
    pub policy: InitPolicy,
    pub mean_accuracy: f64,
    pub runs: Vec<FewShotResult>,
}

/// Rebuild `source` with `new_task` appended. Trained parameters are copied by
/// name; the new embedding rows start at zero.
pub fn extend_model(source: &Model, config: &RunConfig, source_seed: u64, new_task: &TaskSpec) -> Result<(Model, RunConfig)> {
    if source.more_layers().iter().any(|m| m.is_frozen()) {
        return Err(Error::Config(
            "few-shot transfer needs a gated model; this checkpoint has a frozen mapping".into(),
        ));
    }
    let source_tasks = config.tasks.len();
    let mut extended_config = config.clone();
    extended_config.tasks.push(new_task.clone());
    extended_config.validate()?;
    let mut model = Model::build(&config.backbone, &extended_config.adapter_spec(), source_seed)?;
    if model.params.len() != source.params.len() {
        return Err(Error::Checkpoint("source model does not match its config".into()));
    }
    let ids: Vec<_> = model.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let src_id = source
            .params
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("source lacks parameter `{name}`")))?;
        let src = source.params.get(src_id);
        let dst = model.params.get_mut(id);
        if src.shape() == dst.shape() {
            dst.data_mut().copy_from_slice(src.data());
        } else if src.cols() == dst.cols() && src.rows() == source_tasks && dst.rows() == source_tasks + 1 {
            dst.data_mut().fill(0.0);
            dst.data_mut()[..src.len()].copy_from_slice(src.data());
        } else {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                src.shape(),
                dst.shape()
            )));
        }
    }
    let scaling: Vec<usize> = source.more_layers().iter().map(|m| m.scaling_tasks).collect();
    for (layer, s) in model.more_layers_mut().zip(scaling) {
        layer.scaling_tasks = s;
    }
    Ok((model, extended_config))
}

/// Source task whose embedding is closest (mean cosine over sites) to the
/// mean pooled representation of `inputs` run as that task.
pub fn nearest_source_task(model: &mut Model, inputs: &[Vec<usize>], source_tasks: usize) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for t in 0..source_tasks {
        let reps = pooled_representations(model, inputs, t)?;
        let layers = model.more_layers();
        let mut score = 0.0;
        for (site, rows) in reps.iter().enumerate() {
            let dim = rows[0].len();
            let mut mean = vec![0.0; dim];
            for r in rows {
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += v / rows.len() as f64;
                }
            }
            let table = model.params.get(layers[site].embeddings.table);
            score += cosine(&mean, table.row_slice(t));
        }
        score /= reps.len() as f64;
        if score > best.1 {
            best = (t, score);
        }
    }
    Ok(best.0)
}

/// Fill the new task's embedding rows according to `policy`; returns the
/// copied source task if any.
pub fn init_new_task(
    model: &mut Model,
    new_task: usize,
    shots: &[Sample],
    policy: InitPolicy,
    seed: u64,
) -> Result<Option<usize>> {
    let tables: Vec<_> = model.more_layers().iter().map(|m| m.embeddings.table).collect();
    if tables.is_empty() {
        return Err(Error::InvalidArgument("few-shot transfer needs MoRE sites".into()));
    }
    if model.params.get(tables[0]).rows() == 1 {
        // Shared embedding: nothing task-specific to initialize.
        return Ok(None);
    }
    match policy {
        InitPolicy::Kaiming => {
            let mut rng = stream(seed, Stream::FewShot, 1);
            for id in tables {
                let dim = model.params.get(id).cols();
                let row = kaiming_rows(1, dim, &mut rng);
                let table = model.params.get_mut(id);
                table.data_mut()[new_task * dim..(new_task + 1) * dim].copy_from_slice(row.data());
            }
            Ok(None)
        }
        InitPolicy::CopyNearest => {
            let inputs: Vec<_> = shots.iter().map(|s| s.tokens.clone()).collect();
            let source = nearest_source_task(model, &inputs, new_task)?;
            for id in tables {
                let table = model.params.get_mut(id);
                let dim = table.cols();
                table.data_mut().copy_within(source * dim..(source + 1) * dim, new_task * dim);
            }
            Ok(Some(source))
        }
    }
}

/// The new task's data on the source backbone and `k` shots drawn from it.
pub fn new_task_data(config: &RunConfig, source_seed: u64, spec: &TaskSpec, options: &FewShotOptions) -> Result<(SyntheticTask, Vec<Sample>)> {
    if options.shots == 0 {
        return Err(Error::InvalidArgument("k_shots must be >= 1".into()));
    }
    let pool = options.pool_size.max(options.shots);
    let spec = TaskSpec {
        train_size: pool,
        ..spec.clone()
    };
    let task = generate_task(&config.backbone, &spec, config.adapter.rank, source_seed)?;
    let mut rng = stream(options.seed, Stream::FewShot, 0);
    let mut picks = sample_indices(&mut rng, pool, options.shots).into_vec();
    picks.sort_unstable();
    let shots = picks.into_iter().map(|i| task.train[i].clone()).collect();
    Ok((task, shots))
}

/// Transfer `source` to `new_task` with `options.shots` examples.
pub fn few_shot_transfer(
    source: &Model,
    config: &RunConfig,
    source_seed: u64,
    new_task: &TaskSpec,
    options: &FewShotOptions,
) -> Result<(Model, FewShotResult)> {
    let (mut model, extended) = extend_model(source, config, source_seed, new_task)?;
    let task_id = config.tasks.len();
    let (task, shots) = new_task_data(config, source_seed, new_task, options)?;
    let copied_from = init_new_task(&mut model, task_id, &shots, options.policy, options.seed)?;
    let labels = &task.spec.label_tokens;
    let initial_accuracy = accuracy(&mut model, &task.eval, task_id, labels)?;

    let mut training = extended.training.clone();
    training.lr = options.lr;
    training.batch_size = options.batch_size;
    training.steps = options.steps;
    let mut registry = TaskRegistry::new(WeightScheme::Balanced);
    registry.add(new_task.name.clone(), shots)?;
    let mut sampler = BalancedSampler::new(stream(options.seed, Stream::Sampling, 1));
    let mut opt = AdamW::new(model.params.len(), training.weight_decay);
    let warmup = (training.warmup_frac * training.steps as f64).round() as usize;
    let sign = extended.ablations.contrastive_sign();
    for step in 0..training.steps {
        let batch = sampler.next_batch(&registry, training.batch_size)?;
        let data = &registry.tasks()[0].samples;
        let samples: Vec<&Sample> = batch.indices.iter().map(|&i| &data[i]).collect();
        let lr = warmup_linear(training.lr, step, training.steps, warmup);
        let (loss, _) = train_step(&mut model, &samples, task_id, &mut opt, lr, &training, sign)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                step: step + 1,
                detail: format!("few-shot loss {}", loss.total),
            });
        }
    }
    let final_accuracy = accuracy(&mut model, &task.eval, task_id, labels)?;
    Ok((
        model,
        FewShotResult {
            shots: options.shots,
            seed: options.seed,
            policy: options.policy,
            copied_from,
            initial_accuracy,
            accuracy: final_accuracy,
        },
    ))
}

/// Run every shot count for every seed.
pub fn few_shot_sweep(
    source: &Model,
    config: &RunConfig,
    source_seed: u64,
    new_task: &TaskSpec,
    shots: &[usize],
    seeds: &[u64],
    template: &FewShotOptions,
) -> Result<Vec<FewShotSummary>> {
    shots
        .iter()
        .map(|&k| {
            let runs = seeds
                .iter()
                .map(|&seed| {
                    let options = FewShotOptions {
                        shots: k,
                        seed,
                        ..template.clone()
                    };
                    few_shot_transfer(source, config, source_seed, new_task, &options).map(|(_, r)| r)
                })
                .collect::<Result<Vec<_>>>()?;
            let mean = runs.iter().map(|r| r.accuracy).sum::<f64>() / runs.len().max(1) as f64;
            Ok(FewShotSummary {
                shots: k,
                policy: template.policy,
                mean_accuracy: mean,
                runs,
            })
        })
        .collect()
}
