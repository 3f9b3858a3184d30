//! Run configuration.
//!
//! Configs are JSON. Unknown keys are rejected, `backbone` and `tasks` are
//! required, and everything else defaults to the reference hyperparameters
//! (AdamW at lr 3e-4, λ = 0.1, τ = 0.05, batch 32, 10% warmup).

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::more::{MoreFlags, Selection};
use crate::objectives::{ContrastiveSign, DEFAULT_LAMBDA, DEFAULT_TAU};
use crate::sampler::WeightScheme;
use crate::transformer::{AdapterMode, AdapterSpec, BackboneConfig, Site};

/// Token placed at the last input position, where the label is predicted.
pub const ANSWER_TOKEN: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    #[serde(default)]
    pub mode: AdapterMode,
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Task-embedding dimension; defaults to the backbone width.
    #[serde(default)]
    pub embed_dim: Option<usize>,
    /// Constant multiplier on `B·A` for the fixed-rank baseline.
    #[serde(default = "one")]
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            mode: AdapterMode::More,
            rank: default_rank(),
            embed_dim: None,
            alpha: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Emit a train record every `log_every` steps.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Evaluate every `eval_every` steps (0: only at start and end).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub sampling: WeightScheme,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            batch_size: default_batch(),
            steps: default_steps(),
            warmup_frac: default_warmup(),
            weight_decay: default_wd(),
            lambda: default_lambda(),
            tau: default_tau(),
            log_every: default_log_every(),
            eval_every: 0,
            sampling: WeightScheme::Balanced,
        }
    }
}

/// Switches that remove or replace one component each.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub disable_linear_scaling: bool,
    pub soft_selection: bool,
    pub disable_ste: bool,
    pub random_sample: bool,
    pub literal_contrastive_sign: bool,
    pub no_task_embeddings: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 6] = [
        "disable_linear_scaling",
        "soft_selection",
        "disable_ste",
        "random_sample",
        "literal_contrastive_sign",
        "no_task_embeddings",
    ];

    pub fn enable(&mut self, name: &str) -> Result<()> {
        let flag = match name {
            "disable_linear_scaling" => &mut self.disable_linear_scaling,
            "soft_selection" => &mut self.soft_selection,
            "disable_ste" => &mut self.disable_ste,
            "random_sample" => &mut self.random_sample,
            "literal_contrastive_sign" => &mut self.literal_contrastive_sign,
            "no_task_embeddings" => &mut self.no_task_embeddings,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}`; expected one of {:?}",
                    Self::NAMES
                )))
            }
        };
        *flag = true;
        Ok(())
    }

    pub fn flags(&self) -> MoreFlags {
        MoreFlags {
            linear_scaling: !self.disable_linear_scaling,
            selection: if self.soft_selection {
                Selection::Soft
            } else if self.disable_ste {
                Selection::Detached
            } else {
                Selection::Ste
            },
        }
    }

    pub fn contrastive_sign(&self) -> ContrastiveSign {
        if self.literal_contrastive_sign {
            ContrastiveSign::Literal
        } else {
            ContrastiveSign::InfoNce
        }
    }
}

/// Where a teacher perturbation is planted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteRef {
    pub layer: usize,
    pub site: Site,
}

/// One synthetic teacher-student task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    /// Rank of the planted weight perturbation (0: the frozen backbone itself).
    pub intrinsic_rank: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub teacher_seed: u64,
    /// First token of every input.
    pub prefix_token: usize,
    /// Half-open range `[lo, hi)` for the remaining input tokens.
    pub content_tokens: [usize; 2],
    /// Candidate answers; the label is the teacher's argmax among them.
    pub label_tokens: Vec<usize>,
    /// Sites that carry the planted perturbation. Empty: every site.
    #[serde(default)]
    pub perturb_sites: Vec<SiteRef>,
    /// Perturbation Frobenius norm relative to the frozen weight's.
    #[serde(default = "default_perturb_scale")]
    pub perturb_scale: f64,
}

impl TaskSpec {
    /// True if `other` generates exactly the same data.
    pub fn same_data(&self, other: &TaskSpec) -> bool {
        TaskSpec {
            name: String::new(),
            ..self.clone()
        } == TaskSpec {
            name: String::new(),
            ..other.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub ablations: Ablations,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn embed_dim(&self) -> usize {
        self.adapter.embed_dim.unwrap_or(self.backbone.width)
    }

    /// Adapter settings for the model, with ablations applied.
    pub fn adapter_spec(&self) -> AdapterSpec {
        AdapterSpec {
            mode: self.adapter.mode,
            rank: self.adapter.rank,
            num_tasks: self.tasks.len(),
            embed_dim: self.embed_dim(),
            alpha: self.adapter.alpha,
            flags: self.ablations.flags(),
            shared_embedding: self.ablations.no_task_embeddings,
        }
    }

    pub fn sampling_scheme(&self) -> WeightScheme {
        if self.ablations.random_sample {
            WeightScheme::Proportional
        } else {
            self.training.sampling
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let t = &self.training;
        let cfg = |msg: String| Err(Error::Config(msg));
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return cfg(format!("training.lr must be positive, got {}", t.lr));
        }
        if t.batch_size == 0 {
            return cfg("training.batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&t.warmup_frac) {
            return cfg("training.warmup_frac must lie in [0, 1]".into());
        }
        if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
            return cfg("training.lambda must be >= 0".into());
        }
        if !(t.tau > 0.0 && t.tau.is_finite()) {
            return cfg("training.tau must be positive".into());
        }
        if t.weight_decay < 0.0 {
            return cfg("training.weight_decay must be >= 0".into());
        }
        if t.log_every == 0 {
            return cfg("training.log_every must be >= 1".into());
        }
        if self.adapter.rank == 0 {
            return cfg("adapter.rank must be >= 1".into());
        }
        if self.adapter.mode == AdapterMode::More && self.embed_dim() != self.backbone.width {
            return cfg(format!(
                "adapter.embed_dim ({}) must equal backbone.width ({})",
                self.embed_dim(),
                self.backbone.width
            ));
        }
        if self.seeds.is_empty() {
            return cfg("seeds must not be empty".into());
        }
        if self.tasks.is_empty() {
            return cfg("tasks must not be empty".into());
        }
        if self.backbone.seq_len < 3 {
            return cfg("backbone.seq_len must be >= 3 (prefix, content, answer slot)".into());
        }
        let mut names = HashSet::new();
        for task in &self.tasks {
            if !names.insert(task.name.as_str()) {
                return cfg(format!("duplicate task name `{}`", task.name));
            }
            validate_task(task, &self.backbone, self.adapter.rank)?;
        }
        for (i, a) in self.tasks.iter().enumerate() {
            for b in &self.tasks[i + 1..] {
                if a.prefix_token == b.prefix_token && !a.same_data(b) {
                    return cfg(format!(
                        "tasks `{}` and `{}` share prefix token {} but differ; inputs must be disjoint",
                        a.name, b.name, a.prefix_token
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn validate_task(task: &TaskSpec, backbone: &BackboneConfig, max_rank: usize) -> Result<()> {
    let vocab = backbone.vocab_size;
    let err = |msg: String| Err(Error::Config(format!("task `{}`: {msg}", task.name)));
    if task.intrinsic_rank > max_rank {
        return err(format!(
            "intrinsic_rank {} exceeds adapter rank {max_rank}",
            task.intrinsic_rank
        ));
    }
    if task.train_size == 0 || task.eval_size == 0 {
        return err("train_size and eval_size must be >= 1".into());
    }
    let [lo, hi] = task.content_tokens;
    if lo >= hi || hi > vocab {
        return err(format!("content_tokens [{lo}, {hi}) must be a non-empty range within the vocabulary"));
    }
    if task.prefix_token >= vocab {
        return err("prefix_token outside the vocabulary".into());
    }
    if task.prefix_token == ANSWER_TOKEN || lo == ANSWER_TOKEN {
        return err(format!("token {ANSWER_TOKEN} is reserved for the answer slot"));
    }
    let distinct: HashSet<_> = task.label_tokens.iter().collect();
    if distinct.len() < 2 || distinct.len() != task.label_tokens.len() {
        return err("label_tokens needs at least two distinct tokens".into());
    }
    if task.label_tokens.iter().any(|&t| t >= vocab) {
        return err("label token outside the vocabulary".into());
    }
    if !(task.perturb_scale >= 0.0 && task.perturb_scale.is_finite()) {
        return err("perturb_scale must be >= 0".into());
    }
    if let Some(s) = task.perturb_sites.iter().find(|s| s.layer >= backbone.layers) {
        return err(format!("perturb site layer {} out of range", s.layer));
    }
    Ok(())
}

fn default_rank() -> usize {
    8
}
fn one() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    3e-4
}
fn default_batch() -> usize {
    32
}
fn default_steps() -> usize {
    1000
}
fn default_warmup() -> f64 {
    0.1
}
fn default_wd() -> f64 {
    0.01
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_log_every() -> usize {
    10
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}
fn default_output_dir() -> String {
    "runs".to_string()
}
fn default_perturb_scale() -> f64 {
    0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "backbone": {"layers": 1, "width": 8, "heads": 2, "vocab_size": 16, "seq_len": 4},
        "tasks": [{"name": "a", "intrinsic_rank": 1, "train_size": 10, "eval_size": 5,
                   "teacher_seed": 3, "prefix_token": 3, "content_tokens": [6, 16],
                   "label_tokens": [1, 2]}]
    }"#;

    #[test]
    fn defaults_follow_reference_settings() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.training.lr, 3e-4);
        assert_eq!(c.training.lambda, 0.1);
        assert_eq!(c.training.tau, 0.05);
        assert_eq!(c.training.batch_size, 32);
        assert_eq!(c.training.warmup_frac, 0.1);
        assert_eq!(c.adapter.mode, AdapterMode::More);
        assert_eq!(c.embed_dim(), 8);
    }

    #[test]
    fn missing_field_is_named() {
        let text = MINIMAL.replace("\"backbone\"", "\"backbonez\"");
        let err = RunConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("backbonez") || err.contains("backbone"), "{err}");
        let text = r#"{"backbone": {"layers": 1, "width": 8, "heads": 2, "vocab_size": 16, "seq_len": 4}}"#;
        let err = RunConfig::from_json(text).unwrap_err().to_string();
        assert!(err.contains("missing field `tasks`"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = MINIMAL.replacen('{', "{\"bogus\": 1,", 1);
        let err = RunConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("unknown field `bogus`"), "{err}");
    }

    #[test]
    fn semantic_validation() {
        let mut c = RunConfig::from_json(MINIMAL).unwrap();
        c.tasks[0].intrinsic_rank = 9;
        assert!(c.validate().is_err());
        let mut c = RunConfig::from_json(MINIMAL).unwrap();
        c.training.tau = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::from_json(MINIMAL).unwrap();
        c.tasks[0].label_tokens = vec![1, 1];
        assert!(c.validate().is_err());
        let mut c = RunConfig::from_json(MINIMAL).unwrap();
        let mut other = c.tasks[0].clone();
        other.name = "b".into();
        c.tasks.push(other.clone());
        assert!(c.validate().is_ok(), "exact duplicates are allowed");
        c.tasks[1].teacher_seed = 99;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ablation_names() {
        let mut a = Ablations::default();
        for n in Ablations::NAMES {
            a.enable(n).unwrap();
        }
        assert!(a.enable("nope").is_err());
        assert_eq!(a.flags().selection, Selection::Soft);
    }
}
