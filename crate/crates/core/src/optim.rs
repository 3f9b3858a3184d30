//! AdamW with a linear warmup followed by linear decay to zero.

use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl AdamW {
    pub fn new(num_params: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: vec![None; num_params],
            second: vec![None; num_params],
        }
    }

    /// Update every trainable parameter that received a gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.role.trainable())).collect();
        for (id, trainable) in ids {
            let i = id.index();
            let Some(g) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            if !trainable {
                continue;
            }
            let m = self.first[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let w = params.get_mut(id).data_mut();
            for k in 0..g.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                w[k] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * w[k]);
            }
        }
    }
}

/// Learning rate at `step` (0-based) of `total`.
pub fn warmup_linear(base_lr: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if total == 0 {
        return base_lr;
    }
    if warmup > 0 && step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let remaining = total.saturating_sub(step) as f64;
    let span = total.saturating_sub(warmup).max(1) as f64;
    base_lr * remaining / span
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamRole;

    #[test]
    fn schedule_shape() {
        assert_eq!(warmup_linear(1.0, 0, 100, 10), 0.1);
        assert_eq!(warmup_linear(1.0, 9, 100, 10), 1.0);
        assert_eq!(warmup_linear(1.0, 10, 100, 10), 1.0);
        assert!((warmup_linear(1.0, 55, 100, 10) - 0.5).abs() < 1e-12);
        assert!(warmup_linear(1.0, 99, 100, 10) > 0.0);
    }

    #[test]
    fn minimizes_quadratic_and_skips_frozen() {
        let mut p = ParamSet::new();
        let w = p.add("w", Tensor::row(&[3.0, -2.0]), ParamRole::LoraA);
        let f = p.add("f", Tensor::row(&[1.0]), ParamRole::Frozen);
        let mut opt = AdamW::new(p.len(), 0.0);
        for _ in 0..2000 {
            let g = p.get(w).map(|x| 2.0 * x);
            opt.step(&mut p, &[Some(g), Some(Tensor::row(&[5.0]))], 0.01);
        }
        assert!(p.get(w).data().iter().all(|x| x.abs() < 1e-2));
        assert_eq!(p.get(f).data(), &[1.0]);
    }
}
