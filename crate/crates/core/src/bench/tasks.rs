//! Teacher-student synthetic tasks with a controlled intrinsic rank.
//!
//! A task's teacher is the frozen backbone with a random rank-`k` update
//! added to the weights at some sites. Inputs are
//! `[prefix, content.., ANSWER_TOKEN]`; the label is the teacher's most likely
//! label token at the answer slot. A student adapter needs at least rank `k`
//! at those sites to reproduce the teacher exactly.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{validate_task, SiteRef, TaskSpec, ANSWER_TOKEN};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::sampler::{TaskRegistry, WeightScheme};
use crate::tensor::Tensor;
use crate::transformer::{AdapterSpec, BackboneConfig, Model, Site};

/// Rows per forward pass when labelling or evaluating.
pub(crate) const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    /// Label token.
    pub label: usize,
}

/// A planted weight update.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub layer: usize,
    pub site: Site,
    pub delta: Tensor,
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub perturbations: Vec<Perturbation>,
}

/// Generated tasks plus a sampling registry over their training splits.
#[derive(Clone, Debug)]
pub struct Suite {
    pub backbone: BackboneConfig,
    pub seed: u64,
    pub tasks: Vec<SyntheticTask>,
    pub registry: TaskRegistry<Sample>,
}

impl Suite {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn with_scheme(mut self, scheme: WeightScheme) -> Result<Self> {
        self.registry.set_scheme(scheme)?;
        Ok(self)
    }
}

/// Random `m×d` update of rank `k`, with Frobenius norm `scale·‖w0‖`.
pub fn low_rank_delta<R: Rng + ?Sized>(w0: &Tensor, k: usize, scale: f64, rng: &mut R) -> Result<Tensor> {
    let (m, d) = (w0.rows(), w0.cols());
    if k == 0 || k > m.min(d) {
        return Err(Error::InvalidArgument(format!(
            "perturbation rank {k} must lie in 1..={}",
            m.min(d)
        )));
    }
    let u = Tensor::randn(m, k, 1.0, rng);
    let v = Tensor::randn(d, k, 1.0, rng);
    let delta = u.matmul_t(&v)?;
    let factor = scale * w0.frobenius_norm() / delta.frobenius_norm();
    Ok(delta.map(|x| x * factor))
}

fn designated_sites(spec: &TaskSpec, config: &BackboneConfig) -> Vec<SiteRef> {
    if spec.perturb_sites.is_empty() {
        (0..config.layers)
            .flat_map(|layer| Site::ALL.into_iter().map(move |site| SiteRef { layer, site }))
            .collect()
    } else {
        spec.perturb_sites.clone()
    }
}

/// Planted updates for `spec` on the backbone of `seed`.
pub fn perturbations(config: &BackboneConfig, spec: &TaskSpec, seed: u64) -> Result<Vec<Perturbation>> {
    if spec.intrinsic_rank == 0 || spec.perturb_scale == 0.0 {
        return Ok(Vec::new());
    }
    let base = Model::build(config, &AdapterSpec::none(), seed)?;
    let mut rng = stream(seed, Stream::Teacher, spec.teacher_seed);
    designated_sites(spec, config)
        .into_iter()
        .map(|SiteRef { layer, site }| {
            let w0 = base.params.get(base.backbone.blocks[layer].site(site).w0());
            Ok(Perturbation {
                layer,
                site,
                delta: low_rank_delta(w0, spec.intrinsic_rank, spec.perturb_scale, &mut rng)?,
            })
        })
        .collect()
}

/// The frozen backbone of `seed` with `perturbations` added to its weights.
pub fn teacher_model(config: &BackboneConfig, seed: u64, perturbations: &[Perturbation]) -> Result<Model> {
    let mut model = Model::build(config, &AdapterSpec::none(), seed)?;
    for p in perturbations {
        let id = model.backbone.blocks[p.layer].site(p.site).w0();
        let updated = model.params.get(id).zip_map(&p.delta, |w, d| w + d)?;
        model.params.get_mut(id).data_mut().copy_from_slice(updated.data());
    }
    Ok(model)
}

/// Argmax over `label_tokens` of the answer-slot distribution of each input.
/// Ties go to the earlier label token.
pub fn predict_labels(
    model: &mut Model,
    inputs: &[Vec<usize>],
    task: Option<usize>,
    label_tokens: &[usize],
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(CHUNK) {
        let seq = chunk[0].len();
        let probs = model.predict(chunk, task)?;
        for b in 0..chunk.len() {
            let row = probs.row_slice(b * seq + seq - 1);
            let mut best = label_tokens[0];
            for &t in &label_tokens[1..] {
                if row[t] > row[best] {
                    best = t;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

fn draw_inputs(spec: &TaskSpec, seq_len: usize, count: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let [lo, hi] = spec.content_tokens;
    let content = seq_len - 2;
    let space = ((hi - lo) as f64).powi(content as i32);
    if space < count as f64 {
        return Err(Error::Config(format!(
            "task `{}`: only {space} distinct inputs for {count} samples",
            spec.name
        )));
    }
    let mut rng = stream(seed, Stream::Data, spec.teacher_seed);
    let mut seen = HashSet::with_capacity(count);
    let mut inputs = Vec::with_capacity(count);
    while inputs.len() < count {
        let mut tokens = Vec::with_capacity(seq_len);
        tokens.push(spec.prefix_token);
        tokens.extend((0..content).map(|_| rng.random_range(lo..hi)));
        tokens.push(ANSWER_TOKEN);
        if seen.insert(tokens.clone()) {
            inputs.push(tokens);
        }
    }
    Ok(inputs)
}

/// Build one task's teacher and its train/eval splits (disjoint inputs).
pub fn generate_task(config: &BackboneConfig, spec: &TaskSpec, max_rank: usize, seed: u64) -> Result<SyntheticTask> {
    validate_task(spec, config, max_rank)?;
    let perturbations = perturbations(config, spec, seed)?;
    let mut teacher = teacher_model(config, seed, &perturbations)?;
    let inputs = draw_inputs(spec, config.seq_len, spec.train_size + spec.eval_size, seed)?;
    let labels = predict_labels(&mut teacher, &inputs, None, &spec.label_tokens)?;
    let mut samples: Vec<Sample> = inputs
        .into_iter()
        .zip(labels)
        .map(|(tokens, label)| Sample { tokens, label })
        .collect();
    let eval = samples.split_off(spec.train_size);
    Ok(SyntheticTask {
        spec: spec.clone(),
        train: samples,
        eval,
        perturbations,
    })
}

pub fn generate_tasks(
    config: &BackboneConfig,
    specs: &[TaskSpec],
    max_rank: usize,
    scheme: WeightScheme,
    seed: u64,
) -> Result<Suite> {
    if specs.is_empty() {
        return Err(Error::Empty("task list"));
    }
    let mut registry = TaskRegistry::new(scheme);
    let mut tasks = Vec::with_capacity(specs.len());
    for spec in specs {
        let task = generate_task(config, spec, max_rank, seed)?;
        registry.add(spec.name.clone(), task.train.clone())?;
        tasks.push(task);
    }
    Ok(Suite {
        backbone: config.clone(),
        seed,
        tasks,
        registry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rank: usize) -> TaskSpec {
        TaskSpec {
            name: format!("r{rank}"),
            intrinsic_rank: rank,
            train_size: 40,
            eval_size: 20,
            teacher_seed: 7,
            prefix_token: 1,
            content_tokens: [5, 32],
            label_tokens: vec![2, 3, 4],
            perturb_sites: vec![],
            perturb_scale: 0.5,
        }
    }

    #[test]
    fn null_task_labels_are_backbone_predictions() {
        let c = BackboneConfig::default();
        let t = generate_task(&c, &spec(0), 8, 3).unwrap();
        assert!(t.perturbations.is_empty());
        let mut base = Model::build(&c, &AdapterSpec::none(), 3).unwrap();
        let inputs: Vec<_> = t.train.iter().map(|s| s.tokens.clone()).collect();
        let labels = predict_labels(&mut base, &inputs, None, &[2, 3, 4]).unwrap();
        assert!(t.train.iter().zip(labels).all(|(s, l)| s.label == l));
    }

    #[test]
    fn deterministic_and_disjoint() {
        let c = BackboneConfig::default();
        let a = generate_task(&c, &spec(2), 8, 5).unwrap();
        let b = generate_task(&c, &spec(2), 8, 5).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
        let train: HashSet<_> = a.train.iter().map(|s| &s.tokens).collect();
        assert!(a.eval.iter().all(|s| !train.contains(&s.tokens)));
        assert!(a.train.iter().all(|s| s.tokens.len() == c.seq_len && s.tokens[0] == 1));
    }

    #[test]
    fn perturbation_has_requested_norm() {
        let c = BackboneConfig::default();
        let p = perturbations(&c, &spec(3), 1).unwrap();
        assert_eq!(p.len(), 12);
        let base = Model::build(&c, &AdapterSpec::none(), 1).unwrap();
        for q in &p {
            let w0 = base.params.get(base.backbone.blocks[q.layer].site(q.site).w0());
            assert!((q.delta.frobenius_norm() / w0.frobenius_norm() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_above_adapter_rejected() {
        assert!(generate_task(&BackboneConfig::default(), &spec(9), 8, 1).is_err());
    }
}
