//! Training objectives.
//!
//! * contrastive loss tying sample representations to their task embedding,
//!   `-(1/N) Σ_i log softmax_k(sim(h_i, e_k)/τ)[t]` with cosine similarity;
//! * generation loss, token cross-entropy averaged over positions;
//! * total loss `L_gen + λ·L_con`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 0.05;

/// Sign applied to the batch-mean log-likelihood term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveSign {
    /// `-mean log p`, minimized by pulling samples toward their own task.
    #[default]
    InfoNce,
    /// `+mean log p`, the printed form taken literally.
    Literal,
}

/// One step's losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gen_loss: f64,
    pub con_loss: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn new(gen_loss: f64, con_loss: f64, lambda: f64) -> Self {
        Self {
            gen_loss,
            con_loss,
            total: total_value(gen_loss, con_loss, lambda),
            lambda,
        }
    }
}

pub fn total_value(gen_loss: f64, con_loss: f64, lambda: f64) -> f64 {
    gen_loss + lambda * con_loss
}

/// Contrastive loss for a homogeneous batch.
///
/// `samples` is `N×h` (all from `task`), `embeddings` is `T×h`.
pub fn contrastive_loss(
    g: &mut Graph,
    samples: Var,
    task: usize,
    embeddings: Var,
    tau: f64,
    sign: ContrastiveSign,
) -> Result<Var> {
    let (n, t) = (g.value(samples).rows(), g.value(embeddings).rows());
    if n == 0 {
        return Err(Error::Empty("contrastive batch"));
    }
    if task >= t {
        return Err(Error::UnknownTask { task, num_tasks: t });
    }
    let sim = g.cosine_similarity(samples, embeddings)?;
    let logp = g.log_softmax(sim, tau)?;
    let own = g.col_range(logp, task, 1)?;
    let mean = g.mean(own)?;
    match sign {
        ContrastiveSign::InfoNce => g.neg(mean),
        ContrastiveSign::Literal => Ok(mean),
    }
}

/// Mean over positions of `-log predicted[target]`.
///
/// `predicted` is `P×V` with one distribution per row.
pub fn generation_loss(g: &mut Graph, predicted: Var, targets: &[usize]) -> Result<Var> {
    let vocab = g.value(predicted).cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::OutOfRange {
            what: "vocabulary",
            index: bad,
            len: vocab,
        });
    }
    let picked = g.gather(predicted, targets)?;
    let logs = g.log(picked)?;
    let mean = g.mean(logs)?;
    g.neg(mean)
}

pub fn total_loss(g: &mut Graph, gen: Var, con: Var, lambda: f64) -> Result<Var> {
    let weighted = g.scale(con, lambda)?;
    g.add(gen, weighted)
}
