//! Mixture of low-rank experts.
//!
//! One LoRA adapter of maximum rank `r` is read as `r` nested experts: the
//! rank-`k` expert is the first `k` rows of `A` and the first `k` columns of
//! `B`. For a task `t`, a gate maps the task embedding `e_t` to
//! `p_t = softmax(W_g·e_t + b_g)`; the expert of rank `r_t = 1 + argmax p_t`
//! is applied with a straight-through multiplier and a linear rank scaling:
//!
//! ```text
//! h = W0·x + Ste(p_t)[r_t] · (r_t / |T|) · B_t·A_t·x
//! Ste(p)  = p + sg(one_hot(p) - p)
//! ```
//!
//! The multiplier is exactly `1.0` in the forward pass; backward routes the
//! upstream gradient to `p_t[r_t - 1]` and from there into `W_g`, `b_g` and
//! `e_t`.
//!
//! Once trained, [`MoreLayer::freeze_mapping`] evaluates the gate once per
//! task and replaces it with a lookup table, which leaves only the LoRA
//! factors on the inference path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{one_hot, Graph, Var};
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::params::{ParamId, ParamRole, ParamSet, Session};
use crate::tensor::Tensor;

/// Trainable per-task vectors, one row per task.
#[derive(Clone, Debug)]
pub struct TaskEmbeddingTable {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl TaskEmbeddingTable {
    /// Kaiming-normal rows: zero mean, variance `2/h`.
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let e = kaiming_rows(rows, dim, rng);
        let table = params.add(format!("{name}.task_embeddings"), e, ParamRole::TaskEmbedding);
        Self { table, rows, dim }
    }

    pub fn row(&self, s: &mut Session<'_>, row: usize) -> Result<Var> {
        let e = s.bind(self.table);
        s.graph.row_range(e, row, 1)
    }
}

pub fn kaiming_rows<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Tensor {
    Tensor::randn(rows, dim, (2.0 / dim as f64).sqrt(), rng)
}

/// Linear gate producing logits over rank experts.
#[derive(Clone, Debug)]
pub struct RankGate {
    pub weight: ParamId,
    pub bias: ParamId,
    pub ranks: usize,
    pub dim: usize,
}

impl RankGate {
    /// Uniform `±1/√h` for both weight and bias, the usual dense-layer init.
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        ranks: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let w = Tensor::uniform(ranks, dim, bound, rng);
        let b = Tensor::uniform(1, ranks, bound, rng);
        let weight = params.add(format!("{name}.gate_w"), w, ParamRole::GateWeight);
        let bias = params.add(format!("{name}.gate_b"), b, ParamRole::GateBias);
        Self {
            weight,
            bias,
            ranks,
            dim,
        }
    }

    /// `e·W_gᵀ + b_g` for a `1×h` embedding row.
    pub fn logits(&self, s: &mut Session<'_>, e: Var, detached: bool) -> Result<Var> {
        let (w, b) = if detached {
            (s.bind_detached(self.weight), s.bind_detached(self.bias))
        } else {
            (s.bind(self.weight), s.bind(self.bias))
        };
        let wt = s.graph.transpose(w)?;
        let z = s.graph.matmul(e, wt)?;
        s.graph.add(z, b)
    }
}

/// How the gate output is turned into an adapter update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Hard argmax with the straight-through multiplier.
    #[default]
    Ste,
    /// `p`-weighted sum over every rank prefix.
    Soft,
    /// Hard argmax with the gate cut out of the loss.
    Detached,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MoreFlags {
    pub linear_scaling: bool,
    pub selection: Selection,
}

impl Default for MoreFlags {
    fn default() -> Self {
        Self {
            linear_scaling: true,
            selection: Selection::Ste,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "frozen_map", rename_all = "snake_case")]
pub enum Routing {
    TrainGated,
    /// 1-based rank per task.
    FrozenMapping(Vec<usize>),
}

/// Output of the gate for one task.
#[derive(Clone, Copy, Debug)]
pub struct GateOutput {
    pub probs: Var,
    /// 1-based selected rank.
    pub rank: usize,
}

#[derive(Clone, Debug)]
pub struct MoreLayer {
    pub adapter: LoraAdapter,
    pub embeddings: TaskEmbeddingTable,
    pub gate: RankGate,
    pub num_tasks: usize,
    /// `|T|` in the rank scaling, fixed when the model is built.
    pub scaling_tasks: usize,
    pub flags: MoreFlags,
    pub routing: Routing,
    last_selected: Vec<Option<usize>>,
}

impl MoreLayer {
    /// Build around an existing adapter. `embedding_rows` is normally
    /// `num_tasks`; a value of 1 shares one embedding across all tasks.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        adapter: LoraAdapter,
        num_tasks: usize,
        embedding_rows: usize,
        embed_dim: usize,
        flags: MoreFlags,
        rng: &mut R,
    ) -> Result<Self> {
        if num_tasks == 0 || embed_dim == 0 {
            return Err(Error::InvalidArgument(
                "MoRE layer needs at least one task and a positive embedding dim".into(),
            ));
        }
        if embedding_rows != num_tasks && embedding_rows != 1 {
            return Err(Error::InvalidArgument(format!(
                "embedding rows must be {num_tasks} or 1, got {embedding_rows}"
            )));
        }
        let embeddings = TaskEmbeddingTable::init(params, name, embedding_rows, embed_dim, rng);
        let gate = RankGate::init(params, name, adapter.rank, embed_dim, rng);
        Ok(Self {
            adapter,
            embeddings,
            gate,
            num_tasks,
            scaling_tasks: num_tasks,
            flags,
            routing: Routing::TrainGated,
            last_selected: vec![None; num_tasks],
        })
    }

    pub fn max_rank(&self) -> usize {
        self.adapter.rank
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self.routing, Routing::FrozenMapping(_))
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.num_tasks {
            return Err(Error::UnknownTask {
                task,
                num_tasks: self.num_tasks,
            });
        }
        Ok(())
    }

    fn embedding_row(&self, task: usize) -> usize {
        if self.embeddings.rows == 1 {
            0
        } else {
            task
        }
    }

    /// Gate distribution and selected rank for `task`.
    pub fn gate_forward(&self, s: &mut Session<'_>, task: usize) -> Result<GateOutput> {
        self.check_task(task)?;
        let detached = self.flags.selection == Selection::Detached;
        let e = if detached {
            let table = s.bind_detached(self.embeddings.table);
            s.graph.row_range(table, self.embedding_row(task), 1)?
        } else {
            self.embeddings.row(s, self.embedding_row(task))?
        };
        let logits = self.gate.logits(s, e, detached)?;
        let probs = s.graph.softmax(logits, 1.0)?;
        let rank = 1 + s.graph.value(probs).argmax();
        Ok(GateOutput { probs, rank })
    }

    /// Rank the layer would use for `task` right now.
    pub fn selected_rank(&self, params: &ParamSet, task: usize) -> Result<usize> {
        self.check_task(task)?;
        match &self.routing {
            Routing::FrozenMapping(map) => Ok(map[task]),
            Routing::TrainGated => {
                let mut s = Session::new(params);
                Ok(self.gate_forward(&mut s, task)?.rank)
            }
        }
    }

    fn rank_scale(&self, rank: usize) -> f64 {
        if self.flags.linear_scaling {
            rank as f64 / self.scaling_tasks as f64
        } else {
            1.0
        }
    }

    /// Adapted projection of `x` (`n×d`) for `task`.
    pub fn forward(&mut self, s: &mut Session<'_>, x: Var, task: usize) -> Result<Var> {
        self.check_task(task)?;
        let base = self.adapter.base_forward(s, x)?;
        let update = match self.routing.clone() {
            Routing::FrozenMapping(map) => {
                let rank = map[task];
                let upd = self.adapter.prefix_update(s, x, rank)?;
                s.graph.scale(upd, self.rank_scale(rank))?
            }
            Routing::TrainGated => {
                let gate = self.gate_forward(s, task)?;
                self.last_selected[task] = Some(gate.rank);
                match self.flags.selection {
                    Selection::Ste => {
                        let mult = ste_select(&mut s.graph, gate.probs, gate.rank)?;
                        let upd = self.adapter.prefix_update(s, x, gate.rank)?;
                        let upd = s.graph.scale(upd, self.rank_scale(gate.rank))?;
                        s.graph.mul_scalar(upd, mult)?
                    }
                    Selection::Detached => {
                        let upd = self.adapter.prefix_update(s, x, gate.rank)?;
                        s.graph.scale(upd, self.rank_scale(gate.rank))?
                    }
                    Selection::Soft => self.soft_update(s, x, gate.probs)?,
                }
            }
        };
        s.graph.add(base, update)
    }

    /// `Σ_k p_k · c_k · B[:, :k]·A[:k]·x`. Rank component `j` is shared by
    /// every prefix `k > j`, so the sum collapses to one weighted product.
    fn soft_update(&self, s: &mut Session<'_>, x: Var, probs: Var) -> Result<Var> {
        let r = self.max_rank();
        let mut cumulative = Tensor::zeros(r, r);
        for k in 0..r {
            let c = self.rank_scale(k + 1);
            for j in 0..=k {
                cumulative.set(k, j, c);
            }
        }
        let cumulative = s.graph.constant(cumulative);
        let weights = s.graph.matmul(probs, cumulative)?;
        let a = s.bind(self.adapter.a);
        let b = s.bind(self.adapter.b);
        let at = s.graph.transpose(a)?;
        let z = s.graph.matmul(x, at)?;
        let zw = s.graph.mul_row(z, weights)?;
        let bt = s.graph.transpose(b)?;
        s.graph.matmul(zw, bt)
    }

    /// Evaluate the gate for every task once and switch to table lookup.
    pub fn freeze_mapping(&mut self, params: &ParamSet) -> Result<()> {
        if self.is_frozen() {
            return Ok(());
        }
        let map = (0..self.num_tasks)
            .map(|t| self.selected_rank(params, t))
            .collect::<Result<Vec<_>>>()?;
        self.routing = Routing::FrozenMapping(map);
        Ok(())
    }

    /// Last rank recorded by a gated forward, per task.
    pub fn selection_log(&self) -> &[Option<usize>] {
        &self.last_selected
    }

    /// Restore a routing table, validating it.
    pub fn set_routing(&mut self, routing: Routing) -> Result<()> {
        if let Routing::FrozenMapping(map) = &routing {
            if map.len() != self.num_tasks || map.iter().any(|&k| k == 0 || k > self.max_rank()) {
                return Err(Error::InvalidArgument(format!(
                    "frozen map {map:?} invalid for {} tasks and max rank {}",
                    self.num_tasks,
                    self.max_rank()
                )));
            }
        }
        self.routing = routing;
        Ok(())
    }
}

/// Straight-through pick of the selected rank's probability.
///
/// Builds `p + sg(one_hot(argmax p) - p)` and takes entry `rank - 1`. The
/// forward value is exactly `1.0`; the gradient wrt `p` is the upstream
/// gradient placed at `rank - 1`.
pub fn ste_select(g: &mut Graph, probs: Var, rank: usize) -> Result<Var> {
    let p = g.value(probs);
    let len = p.cols();
    let argmax = p.argmax();
    if rank == 0 || rank - 1 != argmax {
        return Err(Error::InvalidArgument(format!(
            "selected rank {rank} is not 1 + argmax(p) = {}",
            argmax + 1
        )));
    }
    let hot = g.constant(one_hot(argmax, len)?);
    let diff = g.sub(hot, probs)?;
    let detached = g.stop_gradient(diff)?;
    let ste = g.add(probs, detached)?;
    let pick = g.col_range(ste, rank - 1, 1)?;
    let v = g.value(pick).data()[0];
    if v != 1.0 {
        return Err(Error::InvalidArgument(format!(
            "straight-through multiplier evaluated to {v:e}, expected 1"
        )));
    }
    Ok(pick)
}

/// Task × rank counts of selected experts over `layers`; row `t` sums to the
/// number of layers.
pub fn allocation_histogram(layers: &[&MoreLayer], params: &ParamSet) -> Result<Vec<Vec<u64>>> {
    let Some(first) = layers.first() else {
        return Ok(Vec::new());
    };
    let (tasks, ranks) = (first.num_tasks, first.max_rank());
    let mut counts = vec![vec![0u64; ranks]; tasks];
    for layer in layers {
        if layer.num_tasks != tasks || layer.max_rank() != ranks {
            return Err(Error::InvalidArgument(
                "all MoRE layers must share task count and max rank".into(),
            ));
        }
        for (t, row) in counts.iter_mut().enumerate() {
            row[layer.selected_rank(params, t)? - 1] += 1;
        }
    }
    Ok(counts)
}
