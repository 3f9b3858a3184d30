//! Closed-form trainable-parameter budgets for LoRA-family adapters, and a
//! live audit of a built model against them.
//!
//! | method    | budget                      |
//! |-----------|-----------------------------|
//! | LoRA      | `6Lr(m+d)`                  |
//! | MultiLoRA | `6nLr(m+d) + 6Ld`           |
//! | MixLoRA   | `2nLr(m+d) + 2Lnm`          |
//! | MOELoRA   | `6Lr(m+d) + 6Lh(n+T)`       |
//! | MoRE      | `6Lr(m+d) + 6Lh(r+T)`       |
//!
//! The MoRE formula counts the gate weight (`r×h`) and the task embeddings
//! (`T×h`) per site but not the gate bias; the audit reports the bias
//! separately.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::{AdapterMode, Model, Projection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lora,
    Multilora,
    Mixlora,
    Moelora,
    More,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Lora,
        Method::Multilora,
        Method::Mixlora,
        Method::Moelora,
        Method::More,
    ];

    pub fn formula(self) -> &'static str {
        match self {
            Method::Lora => "6Lr(m+d)",
            Method::Multilora => "6nLr(m+d)+6Ld",
            Method::Mixlora => "2nLr(m+d)+2Lnm",
            Method::Moelora => "6Lr(m+d)+6Lh(n+T)",
            Method::More => "6Lr(m+d)+6Lh(r+T)",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s.to_ascii_lowercase().as_str() {
            "lora" => Some(Method::Lora),
            "multilora" => Some(Method::Multilora),
            "mixlora" => Some(Method::Mixlora),
            "moelora" => Some(Method::Moelora),
            "more" => Some(Method::More),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetInputs {
    pub layers: u64,
    pub rank: u64,
    pub m: u64,
    pub d: u64,
    /// Parallel modules; only MultiLoRA, MixLoRA and MOELoRA use it.
    pub n: Option<u64>,
    pub tasks: u64,
    pub embed_dim: u64,
}

impl BudgetInputs {
    fn validate(&self) -> Result<()> {
        let all = [self.layers, self.rank, self.m, self.d, self.tasks, self.embed_dim];
        if all.contains(&0) || self.n == Some(0) {
            return Err(Error::InvalidArgument("budget inputs must all be >= 1".into()));
        }
        Ok(())
    }
}

pub fn budget(method: Method, x: &BudgetInputs) -> Result<u64> {
    x.validate()?;
    let BudgetInputs {
        layers: l,
        rank: r,
        m,
        d,
        tasks: t,
        embed_dim: h,
        ..
    } = *x;
    let n = || {
        x.n.ok_or_else(|| Error::InvalidArgument(format!("{method:?} budget needs n")))
    };
    let lora = 6 * l * r * (m + d);
    Ok(match method {
        Method::Lora => lora,
        Method::Multilora => 6 * n()? * l * r * (m + d) + 6 * l * d,
        Method::Mixlora => {
            let n = n()?;
            2 * n * l * r * (m + d) + 2 * l * n * m
        }
        Method::Moelora => lora + 6 * l * h * (n()? + t),
        Method::More => lora + 6 * l * h * (r + t),
    })
}

/// Per-site counts from a live model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteCount {
    pub site: String,
    pub expected: u64,
    pub live: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub mode: AdapterMode,
    pub method: Option<Method>,
    pub formula: Option<String>,
    pub inputs: Option<BudgetInputs>,
    pub budget: Option<u64>,
    /// Trainable parameters counted by the formula's terms.
    pub live_counted: u64,
    /// Gate biases: trainable but outside the formula.
    pub gate_bias_unaccounted: u64,
    /// Every trainable parameter in the model.
    pub live_total: u64,
    /// Parameters left on the inference path once the task→rank mapping is
    /// frozen (gates and embeddings are skipped).
    pub inference_effective: u64,
    pub frozen_mapping: bool,
    pub status: String,
    pub mismatched_sites: Vec<SiteCount>,
    /// Budgets of every method at this model's dimensions (where defined).
    pub comparison: Vec<(Method, Option<u64>)>,
}

/// Compare a model's live trainable parameters with its closed form.
pub fn audit(model: &Model) -> AuditReport {
    let cfg = model.config();
    let spec = &model.backbone.spec;
    let params = &model.params;
    let mut mismatched = Vec::new();
    let mut counted = 0u64;
    let mut bias = 0u64;
    let mut lora_only = 0u64;
    let mut square = true;
    for (layer, site, proj) in model.sites() {
        let (out_dim, in_dim) = proj.dims();
        square &= out_dim == cfg.width && in_dim == cfg.width;
        let (expected, live) = match proj {
            Projection::Frozen { .. } => (0, 0),
            Projection::Lora(l) => {
                let live = (params.get(l.a).len() + params.get(l.b).len()) as u64;
                lora_only += live;
                (l.trainable_len() as u64, live)
            }
            Projection::More(mr) => {
                let r = mr.max_rank() as u64;
                let h = mr.embeddings.dim as u64;
                let t = mr.embeddings.rows as u64;
                let lora = (params.get(mr.adapter.a).len() + params.get(mr.adapter.b).len()) as u64;
                let live = lora
                    + params.get(mr.gate.weight).len() as u64
                    + params.get(mr.embeddings.table).len() as u64;
                bias += params.get(mr.gate.bias).len() as u64;
                lora_only += lora;
                (r * (out_dim + in_dim) as u64 + h * (r + t), live)
            }
        };
        counted += live;
        if expected != live {
            mismatched.push(SiteCount {
                site: format!("layers.{layer}.{}", site.name()),
                expected,
                live,
            });
        }
    }
    let live_total = params
        .iter()
        .filter(|(_, p)| p.role.trainable())
        .map(|(_, p)| p.value.len() as u64)
        .sum::<u64>();

    let method = match spec.mode {
        AdapterMode::None => None,
        AdapterMode::LoraFixed => Some(Method::Lora),
        AdapterMode::More => Some(Method::More),
    };
    let embed_rows = model
        .more_layers()
        .first()
        .map_or(spec.num_tasks, |m| m.embeddings.rows);
    let inputs = method.map(|_| BudgetInputs {
        layers: cfg.layers as u64,
        rank: spec.rank as u64,
        m: cfg.width as u64,
        d: cfg.width as u64,
        n: None,
        tasks: embed_rows as u64,
        embed_dim: spec.embed_dim.max(1) as u64,
    });
    let budget_value = match (method, &inputs) {
        (Some(m), Some(x)) if square => budget(m, x).ok(),
        _ => None,
    };
    let frozen_mapping = !model.more_layers().is_empty() && model.more_layers().iter().all(|m| m.is_frozen());
    let inference_effective = if frozen_mapping || spec.mode == AdapterMode::LoraFixed {
        lora_only
    } else {
        live_total
    };
    let status = match (method, budget_value) {
        (None, _) => {
            if live_total == 0 {
                "exact".to_string()
            } else {
                "mismatch".to_string()
            }
        }
        (Some(_), None) => "formula_inapplicable_non_square_sites".to_string(),
        (Some(_), Some(b)) if b == counted && mismatched.is_empty() => "exact".to_string(),
        _ => "mismatch".to_string(),
    };
    let comparison = inputs
        .map(|x| Method::ALL.iter().map(|&m| (m, budget(m, &x).ok())).collect())
        .unwrap_or_default();
    AuditReport {
        mode: spec.mode,
        method,
        formula: method.map(|m| m.formula().to_string()),
        inputs,
        budget: budget_value,
        live_counted: counted,
        gate_bias_unaccounted: bias,
        live_total,
        inference_effective,
        frozen_mapping,
        status,
        mismatched_sites: mismatched,
        comparison,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(l: u64, r: u64, m: u64, d: u64, h: u64, t: u64) -> BudgetInputs {
        BudgetInputs {
            layers: l,
            rank: r,
            m,
            d,
            n: None,
            tasks: t,
            embed_dim: h,
        }
    }

    #[test]
    fn lora_unit_scale() {
        assert_eq!(budget(Method::Lora, &inputs(1, 1, 1, 1, 1, 1)).unwrap(), 12);
    }

    #[test]
    fn more_matches_double_rank_lora_at_base_dims() {
        let more = budget(Method::More, &inputs(12, 8, 768, 768, 768, 8)).unwrap();
        let lora16 = budget(Method::Lora, &inputs(12, 16, 768, 768, 768, 8)).unwrap();
        assert_eq!(more, 1_769_472);
        assert_eq!(more, lora16);
    }

    #[test]
    fn parallel_methods_need_n() {
        let x = inputs(2, 4, 8, 8, 8, 3);
        for m in [Method::Multilora, Method::Mixlora, Method::Moelora] {
            assert!(budget(m, &x).is_err());
        }
        let x = BudgetInputs { n: Some(3), ..x };
        assert_eq!(budget(Method::Multilora, &x).unwrap(), 6 * 3 * 2 * 4 * 16 + 6 * 2 * 8);
        assert_eq!(budget(Method::Mixlora, &x).unwrap(), 2 * 3 * 2 * 4 * 16 + 2 * 2 * 3 * 8);
        assert_eq!(budget(Method::Moelora, &x).unwrap(), 6 * 2 * 4 * 16 + 6 * 2 * 8 * (3 + 3));
    }

    #[test]
    fn zero_inputs_rejected() {
        assert!(budget(Method::Lora, &inputs(0, 1, 1, 1, 1, 1)).is_err());
    }

    #[test]
    fn rank_linearity() {
        let a = budget(Method::Lora, &inputs(2, 8, 16, 16, 16, 4)).unwrap();
        let b = budget(Method::Lora, &inputs(2, 16, 16, 16, 16, 4)).unwrap();
        assert_eq!(2 * a, b);
    }
}
