//! Training and evaluation loops.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::tasks::{predict_labels, Sample, Suite};
use crate::config::TrainingConfig;
use crate::error::{Error, Result};
use crate::more::allocation_histogram;
use crate::objectives::{contrastive_loss, generation_loss, total_loss, ContrastiveSign, LossReport};
use crate::optim::{warmup_linear, AdamW};
use crate::params::Session;
use crate::rng::{stream, RngState, Stream};
use crate::sampler::{BalancedSampler, TaskRegistry};
use crate::autograd::Var;
use crate::transformer::{Backbone, Model, Site};

/// Task-embedding table of one MoRE site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSnapshot {
    pub layer: usize,
    pub site: Site,
    pub rows: Vec<Vec<f64>>,
}

/// One line of the metrics stream. `step` is the logical timestamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Train {
        step: usize,
        seed: u64,
        task: usize,
        lr: f64,
        #[serde(flatten)]
        loss: LossReport,
        /// Rank picked at each MoRE site for this batch.
        selected: Vec<usize>,
    },
    Eval {
        step: usize,
        seed: u64,
        accuracy: Vec<f64>,
        mean_accuracy: f64,
        /// Task × rank selection counts over MoRE sites.
        allocation: Option<Vec<Vec<u64>>>,
    },
    Summary {
        step: usize,
        seed: u64,
        frozen_hash_before: String,
        frozen_hash_after: String,
        embeddings: Vec<EmbeddingSnapshot>,
    },
}

/// Append-only record stream of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<MetricRecord>,
    /// Batch sampler position when the run ended.
    #[serde(skip)]
    pub sampler_state: Option<RngState>,
}

impl RunMetrics {
    pub fn push(&mut self, record: MetricRecord) {
        self.records.push(record);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("metric record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn last_eval(&self) -> Option<(&[f64], f64)> {
        self.records.iter().rev().find_map(|r| match r {
            MetricRecord::Eval {
                accuracy,
                mean_accuracy,
                ..
            } => Some((accuracy.as_slice(), *mean_accuracy)),
            _ => None,
        })
    }

    pub fn final_allocation(&self) -> Option<&Vec<Vec<u64>>> {
        self.records.iter().rev().find_map(|r| match r {
            MetricRecord::Eval { allocation, .. } => allocation.as_ref(),
            _ => None,
        })
    }
}

/// Everything the loop needs beyond the model and data.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub training: TrainingConfig,
    pub sign: ContrastiveSign,
    pub seed: u64,
}

/// Fraction of `samples` whose predicted label token matches.
pub fn accuracy(model: &mut Model, samples: &[Sample], task: usize, label_tokens: &[usize]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let inputs: Vec<_> = samples.iter().map(|s| s.tokens.clone()).collect();
    let predicted = predict_labels(model, &inputs, Some(task), label_tokens)?;
    let hits = predicted.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Held-out accuracy per task.
pub fn evaluate(suite: &Suite, model: &mut Model) -> Result<Vec<f64>> {
    suite
        .tasks
        .iter()
        .enumerate()
        .map(|(t, task)| accuracy(model, &task.eval, t, &task.spec.label_tokens))
        .collect()
}

fn allocation(model: &Model) -> Result<Option<Vec<Vec<u64>>>> {
    let layers = model.more_layers();
    if layers.is_empty() {
        return Ok(None);
    }
    Ok(Some(allocation_histogram(&layers, &model.params)?))
}

fn eval_record(suite: &Suite, model: &mut Model, step: usize, seed: u64) -> Result<MetricRecord> {
    let acc = evaluate(suite, model)?;
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    Ok(MetricRecord::Eval {
        step,
        seed,
        accuracy: acc,
        mean_accuracy: mean,
        allocation: allocation(model)?,
    })
}

pub fn embedding_snapshots(model: &Model) -> Vec<EmbeddingSnapshot> {
    model
        .sites()
        .filter_map(|(layer, site, p)| {
            let m = p.as_more()?;
            let table = model.params.get(m.embeddings.table);
            Some(EmbeddingSnapshot {
                layer,
                site,
                rows: (0..table.rows()).map(|r| table.row_slice(r).to_vec()).collect(),
            })
        })
        .collect()
}

/// Loss nodes for one homogeneous batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub gen: Var,
    /// Mean contrastive term over MoRE sites with per-task embeddings.
    pub con: Option<Var>,
}

/// Build `gen + λ·con` for `tokens` (all from `task`) with answer-slot
/// targets `targets`.
pub fn batch_loss(
    s: &mut Session<'_>,
    backbone: &mut Backbone,
    tokens: &[Vec<usize>],
    targets: &[usize],
    task: usize,
    training: &TrainingConfig,
    sign: ContrastiveSign,
) -> Result<BatchLoss> {
    let out = backbone.forward(s, tokens, Some(task))?;
    let answer_rows: Vec<usize> = (0..out.batch).map(|b| out.row(b, out.seq - 1)).collect();
    let predicted = s.graph.select_rows(out.probs, &answer_rows)?;
    let gen = generation_loss(&mut s.graph, predicted, targets)?;

    let mut terms = Vec::new();
    for pooled in &out.pooled {
        let layer = backbone.blocks[pooled.layer]
            .site(pooled.site)
            .as_more()
            .expect("pooled inputs come from MoRE sites");
        if layer.embeddings.rows < 2 || layer.is_frozen() {
            continue;
        }
        let table = s.bind(layer.embeddings.table);
        terms.push(contrastive_loss(&mut s.graph, pooled.pooled, task, table, training.tau, sign)?);
    }
    let con = match terms.len() {
        0 => None,
        1 => Some(terms[0]),
        _ => {
            let rows = s.graph.concat_rows(&terms)?;
            Some(s.graph.mean(rows)?)
        }
    };
    let total = match con {
        Some(c) => total_loss(&mut s.graph, gen, c, training.lambda)?,
        None => gen,
    };
    Ok(BatchLoss { total, gen, con })
}

/// One optimizer step on a homogeneous batch.
pub fn train_step(
    model: &mut Model,
    samples: &[&Sample],
    task: usize,
    opt: &mut AdamW,
    lr: f64,
    training: &TrainingConfig,
    sign: ContrastiveSign,
) -> Result<(LossReport, Vec<usize>)> {
    let tokens: Vec<Vec<usize>> = samples.iter().map(|s| s.tokens.clone()).collect();
    let targets: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let Model { params, backbone } = model;
    let mut s = Session::new(params);
    let loss = batch_loss(&mut s, backbone, &tokens, &targets, task, training, sign)?;
    let gen_value = s.graph.value(loss.gen).data()[0];
    let con_value = loss.con.map_or(0.0, |c| s.graph.value(c).data()[0]);
    s.backward(loss.total)?;
    let grads = s.gradients();
    drop(s);
    opt.step(params, &grads, lr);

    let selected = model
        .more_layers()
        .iter()
        .map(|m| m.selection_log()[task].unwrap_or(0))
        .collect();
    Ok((LossReport::new(gen_value, con_value, training.lambda), selected))
}

/// Train `model` on `suite`; batches come from `registry` (the suite's own
/// registry unless a caller substitutes one).
pub fn train_on(
    suite: &Suite,
    registry: &TaskRegistry<Sample>,
    model: &mut Model,
    options: &TrainOptions,
) -> Result<RunMetrics> {
    let TrainOptions { training, sign, seed } = options;
    let seed = *seed;
    let mut metrics = RunMetrics::default();
    metrics.push(eval_record(suite, model, 0, seed)?);
    if training.steps == 0 {
        return Ok(metrics);
    }
    let hash_before = model.params.frozen_hash();
    let mut sampler = BalancedSampler::new(stream(seed, Stream::Sampling, 0));
    let mut opt = AdamW::new(model.params.len(), training.weight_decay);
    let warmup = (training.warmup_frac * training.steps as f64).round() as usize;
    for step in 0..training.steps {
        let batch = sampler.next_batch(registry, training.batch_size)?;
        let data = &registry.tasks()[batch.task].samples;
        let samples: Vec<&Sample> = batch.indices.iter().map(|&i| &data[i]).collect();
        let lr = warmup_linear(training.lr, step, training.steps, warmup);
        let (loss, selected) = train_step(model, &samples, batch.task, &mut opt, lr, training, *sign)
            .map_err(|e| match e {
                Error::NonFinite { op } => Error::Divergence {
                    step: step + 1,
                    detail: format!("non-finite value in {op} (task {})", batch.task),
                },
                other => other,
            })?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                step: step + 1,
                detail: format!("loss {} on task {}", loss.total, batch.task),
            });
        }
        let done = step + 1;
        if done % training.log_every == 0 || done == training.steps {
            metrics.push(MetricRecord::Train {
                step: done,
                seed,
                task: batch.task,
                lr,
                loss,
                selected,
            });
        }
        if training.eval_every > 0 && done % training.eval_every == 0 && done != training.steps {
            metrics.push(eval_record(suite, model, done, seed)?);
        }
    }
    metrics.push(eval_record(suite, model, training.steps, seed)?);
    let hash_after = model.params.frozen_hash();
    if hash_after != hash_before {
        return Err(Error::InvalidArgument(
            "frozen backbone weights changed during training".into(),
        ));
    }
    metrics.sampler_state = Some(RngState::capture(sampler.rng()));
    metrics.push(MetricRecord::Summary {
        step: training.steps,
        seed,
        frozen_hash_before: hash_before,
        frozen_hash_after: hash_after,
        embeddings: embedding_snapshots(model),
    });
    Ok(metrics)
}

pub fn train(suite: &Suite, model: &mut Model, options: &TrainOptions) -> Result<RunMetrics> {
    train_on(suite, &suite.registry, model, options)
}
