//! Dataset-size-aware task sampling.
//!
//! Each batch comes from a single task. The task is drawn from
//! `Φ_t ∝ exp(|D_t| / Σ_i |D_i|)`, a softmax over size proportions that sits
//! between uniform and proportional sampling, so small datasets are visited
//! more often than their share of the data.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// Softmax over size proportions.
    #[default]
    Balanced,
    /// Proportional to size (plain random sampling over the union).
    Proportional,
    /// Proportional to `1/|D_t|`.
    InverseSize,
}

pub fn compute_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    weights_for(sizes, WeightScheme::Balanced)
}

pub fn weights_for(sizes: &[usize], scheme: WeightScheme) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Empty("task registry"));
    }
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::InvalidArgument(format!("task {i} has an empty dataset")));
    }
    let total: f64 = sizes.iter().map(|&s| s as f64).sum();
    let raw: Vec<f64> = match scheme {
        WeightScheme::Balanced => {
            // Proportions lie in (0, 1]; subtract the max before exp anyway.
            let props: Vec<f64> = sizes.iter().map(|&s| s as f64 / total).collect();
            let max = props.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            props.iter().map(|p| (p - max).exp()).collect()
        }
        WeightScheme::Proportional => sizes.iter().map(|&s| s as f64).collect(),
        WeightScheme::InverseSize => sizes.iter().map(|&s| 1.0 / s as f64).collect(),
    };
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / z).collect())
}

/// A task and its training samples.
#[derive(Clone, Debug)]
pub struct TaskData<S> {
    pub name: String,
    pub samples: Vec<S>,
}

/// Registered tasks plus their sampling weights.
#[derive(Clone, Debug)]
pub struct TaskRegistry<S> {
    tasks: Vec<TaskData<S>>,
    scheme: WeightScheme,
    weights: Vec<f64>,
}

impl<S> TaskRegistry<S> {
    pub fn new(scheme: WeightScheme) -> Self {
        Self {
            tasks: Vec::new(),
            scheme,
            weights: Vec::new(),
        }
    }

    /// Register a task; returns its id.
    pub fn add(&mut self, name: impl Into<String>, samples: Vec<S>) -> Result<usize> {
        if samples.is_empty() {
            return Err(Error::Empty("task dataset"));
        }
        self.tasks.push(TaskData {
            name: name.into(),
            samples,
        });
        self.refresh()?;
        Ok(self.tasks.len() - 1)
    }

    pub fn remove(&mut self, task: usize) -> Result<TaskData<S>> {
        if task >= self.tasks.len() {
            return Err(Error::UnknownTask {
                task,
                num_tasks: self.tasks.len(),
            });
        }
        let removed = self.tasks.remove(task);
        if self.tasks.is_empty() {
            self.weights.clear();
        } else {
            self.refresh()?;
        }
        Ok(removed)
    }

    fn refresh(&mut self) -> Result<()> {
        self.weights = weights_for(&self.sizes(), self.scheme)?;
        Ok(())
    }

    pub fn set_scheme(&mut self, scheme: WeightScheme) -> Result<()> {
        self.scheme = scheme;
        if !self.tasks.is_empty() {
            self.refresh()?;
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.samples.len()).collect()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, id: usize) -> Option<&TaskData<S>> {
        self.tasks.get(id)
    }

    pub fn tasks(&self) -> &[TaskData<S>] {
        &self.tasks
    }
}

/// Draws homogeneous batches.
pub struct BalancedSampler {
    rng: ChaCha8Rng,
}

/// Indices into one task's dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub task: usize,
    pub indices: Vec<usize>,
}

impl BalancedSampler {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn draw_task<S>(&mut self, registry: &TaskRegistry<S>) -> Result<usize> {
        if registry.is_empty() {
            return Err(Error::Empty("task registry"));
        }
        let dist = WeightedIndex::new(registry.weights())
            .map_err(|e| Error::InvalidArgument(format!("sampling weights: {e}")))?;
        Ok(dist.sample(&mut self.rng))
    }

    /// One task from `Φ`, then `batch_size` uniform draws with replacement.
    pub fn next_batch<S>(&mut self, registry: &TaskRegistry<S>, batch_size: usize) -> Result<Batch> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        let task = self.draw_task(registry)?;
        let n = registry.tasks[task].samples.len();
        let indices = (0..batch_size).map(|_| self.rng.random_range(0..n)).collect();
        Ok(Batch { task, indices })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn equal_sizes_are_uniform() {
        assert_eq!(compute_weights(&[100, 100]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn empty_registry_is_an_error() {
        assert!(compute_weights(&[]).is_err());
        assert!(compute_weights(&[3, 0]).is_err());
        let mut s = BalancedSampler::new(stream(0, Stream::Sampling, 0));
        let r: TaskRegistry<u8> = TaskRegistry::new(WeightScheme::Balanced);
        assert!(s.next_batch(&r, 4).is_err());
        let mut r: TaskRegistry<u8> = TaskRegistry::new(WeightScheme::Balanced);
        assert!(r.add("empty", vec![]).is_err());
    }

    #[test]
    fn single_task_always_drawn() {
        let mut r = TaskRegistry::new(WeightScheme::Balanced);
        r.add("only", vec![1u8, 2, 3]).unwrap();
        let mut s = BalancedSampler::new(stream(1, Stream::Sampling, 0));
        for _ in 0..50 {
            let b = s.next_batch(&r, 5).unwrap();
            assert_eq!(b.task, 0);
            assert!(b.indices.iter().all(|&i| i < 3));
        }
    }

    #[test]
    fn weights_follow_registry_changes() {
        let mut r = TaskRegistry::new(WeightScheme::Balanced);
        r.add("a", vec![0u8; 10]).unwrap();
        assert_eq!(r.weights(), &[1.0]);
        r.add("b", vec![0u8; 10]).unwrap();
        assert_eq!(r.weights(), &[0.5, 0.5]);
        r.remove(0).unwrap();
        assert_eq!(r.weights(), &[1.0]);
    }

    #[test]
    fn schemes_order_small_task_weight() {
        let sizes = [900, 100];
        let prop = weights_for(&sizes, WeightScheme::Proportional).unwrap();
        let bal = weights_for(&sizes, WeightScheme::Balanced).unwrap();
        let inv = weights_for(&sizes, WeightScheme::InverseSize).unwrap();
        assert!((prop[1] - 0.1).abs() < 1e-15);
        assert!(bal[1] > prop[1] && bal[1] < 0.5);
        assert!((inv[1] - 0.9).abs() < 1e-12);
    }
}
