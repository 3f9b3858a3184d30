//! Named parameter storage shared by every layer of a model.
//!
//! Layers hold [`ParamId`]s into a [`ParamSet`]; a [`Session`] binds them into
//! a fresh [`Graph`] on first use so each parameter appears as exactly one
//! leaf per step.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter is for; drives budgets and optimizer masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Frozen,
    LoraA,
    LoraB,
    TaskEmbedding,
    GateWeight,
    GateBias,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::Frozen)
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, role: ParamRole) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            role,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replace a value, keeping the shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamSet::set",
                lhs: slot.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.role.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over names and bit patterns of all frozen parameters.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| !p.role.trainable()) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// One forward/backward pass worth of graph plus parameter bindings.
pub struct Session<'p> {
    pub graph: Graph,
    params: &'p ParamSet,
    bound: Vec<Option<Var>>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    /// Leaf for `id`, created on first request. Frozen parameters become
    /// constants.
    pub fn bind(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = &self.params.params[id.0];
        let v = self.graph.leaf(p.value.clone(), p.role.trainable());
        self.bound[id.0] = Some(v);
        v
    }

    /// Bind as a constant regardless of role (used to detach a parameter).
    pub fn bind_detached(&mut self, id: ParamId) -> Var {
        self.graph.constant(self.params.params[id.0].value.clone())
    }

    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.graph.backward(root)
    }

    /// Gradient for every trainable parameter; `None` where nothing flowed.
    pub fn gradients(&self) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.graph.grad(v).cloned()))
            .collect()
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.bound[id.0].and_then(|v| self.graph.grad(v))
    }
}
