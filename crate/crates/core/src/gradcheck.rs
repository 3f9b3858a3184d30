//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is used to verify.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamSet, Session};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest relative error over all checked entries.
    pub max_rel_error: f64,
    /// Largest absolute error over all checked entries.
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error with a floor on the denominator so that entries whose
/// true gradient is ~0 are judged on absolute error.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Check `f`'s gradients wrt every input tensor.
///
/// `f` receives a fresh graph and leaf vars for `inputs` and must return a
/// scalar node. Every entry of every input is perturbed.
pub fn check<F>(inputs: &[Tensor], step: f64, floor: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let orig = input.data()[idx];
            work[k].data_mut()[idx] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[idx] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[k].data()[idx];
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(rel_error(a, numeric, floor));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Check gradients of a loss over model parameters at the listed
/// `(parameter, flat index)` entries.
///
/// `f` builds the loss in a fresh session each time it is called; the
/// numerical side perturbs a copy of `params`.
pub fn check_params<F>(
    params: &ParamSet,
    entries: &[(ParamId, usize)],
    step: f64,
    floor: f64,
    mut f: F,
) -> Result<GradCheck>
where
    F: FnMut(&mut Session<'_>) -> Result<Var>,
{
    let analytic: Vec<f64> = {
        let mut s = Session::new(params);
        let out = f(&mut s)?;
        s.backward(out)?;
        entries
            .iter()
            .map(|&(id, i)| s.grad(id).map_or(0.0, |g| g.data()[i]))
            .collect()
    };
    let mut work = params.clone();
    let mut eval = |work: &ParamSet| -> Result<f64> {
        let mut s = Session::new(work);
        let out = f(&mut s)?;
        Ok(s.graph.value(out).data()[0])
    };
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    for (&(id, i), &a) in entries.iter().zip(&analytic) {
        let orig = params.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + step;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig - step;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        report.max_rel_error = report.max_rel_error.max(rel_error(a, numeric, floor));
        report.checked += 1;
    }
    Ok(report)
}
