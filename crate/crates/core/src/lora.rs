//! Classic low-rank adaptation of a frozen linear map.
//!
//! `W0` is `m×d` and stays frozen. The update `ΔW = B·A` uses `A: r×d`
//! (Gaussian, variance `1/r`) and `B: m×r` (zeros), so a fresh adapter
//! computes exactly `W0·x`.
//!
//! Activations are stored as rows (`n×d`), so the forward pass evaluates
//! `x·W0ᵀ + α·(x·Aᵀ)·Bᵀ`, the row-major transcription of `W0·x + α·B·A·x`.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamRole, ParamSet, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub w0: ParamId,
    pub a: ParamId,
    pub b: ParamId,
    pub out_dim: usize,
    pub in_dim: usize,
    pub rank: usize,
    pub alpha_scaling: f64,
}

impl LoraAdapter {
    /// New adapter around a supplied frozen base weight (`m×d`).
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        w0: Tensor,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (m, d) = (w0.rows(), w0.cols());
        validate_dims(m, d, rank)?;
        let a = Tensor::randn(rank, d, (1.0 / rank as f64).sqrt(), rng);
        let w0 = params.add(format!("{name}.w0"), w0, ParamRole::Frozen);
        let a = params.add(format!("{name}.lora_a"), a, ParamRole::LoraA);
        let b = params.add(format!("{name}.lora_b"), Tensor::zeros(m, rank), ParamRole::LoraB);
        Ok(Self {
            w0,
            a,
            b,
            out_dim: m,
            in_dim: d,
            rank,
            alpha_scaling: 1.0,
        })
    }

    /// New adapter with a random frozen base weight (Gaussian, std `1/√d`).
    pub fn init_random<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        m: usize,
        d: usize,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        validate_dims(m, d, rank)?;
        let w0 = Tensor::randn(m, d, (1.0 / d as f64).sqrt(), rng);
        Self::init(params, name, w0, rank, rng)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha_scaling = alpha;
        self
    }

    /// `x·W0ᵀ` only.
    pub fn base_forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        check_input(s, x, self.in_dim)?;
        let w0 = s.bind(self.w0);
        let w0t = s.graph.transpose(w0)?;
        s.graph.matmul(x, w0t)
    }

    /// `(x·A[:k]ᵀ)·B[:, :k]ᵀ` for the first `k` ranks, unscaled.
    pub fn prefix_update(&self, s: &mut Session<'_>, x: Var, k: usize) -> Result<Var> {
        if k == 0 || k > self.rank {
            return Err(Error::OutOfRange {
                what: "rank prefix",
                index: k,
                len: self.rank,
            });
        }
        let a = s.bind(self.a);
        let b = s.bind(self.b);
        let a_k = s.graph.slice_rows(a, k)?;
        let b_k = s.graph.slice_cols(b, k)?;
        let a_kt = s.graph.transpose(a_k)?;
        let b_kt = s.graph.transpose(b_k)?;
        let z = s.graph.matmul(x, a_kt)?;
        s.graph.matmul(z, b_kt)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let base = self.base_forward(s, x)?;
        let upd = self.prefix_update(s, x, self.rank)?;
        let upd = s.graph.scale(upd, self.alpha_scaling)?;
        s.graph.add(base, upd)
    }

    /// `W0 + α·B·A`, for deploying the fixed-rank baseline as a plain matrix.
    pub fn merged_weight(&self, params: &ParamSet) -> Result<Tensor> {
        let ba = params.get(self.b).matmul(params.get(self.a))?;
        params
            .get(self.w0)
            .zip_map(&ba, |w, u| w + self.alpha_scaling * u)
    }

    pub fn trainable_len(&self) -> usize {
        self.rank * (self.out_dim + self.in_dim)
    }
}

fn validate_dims(m: usize, d: usize, rank: usize) -> Result<()> {
    if m == 0 || d == 0 || rank == 0 || rank > m.min(d) {
        return Err(Error::InvalidArgument(format!(
            "LoRA needs 1 <= r <= min(m, d); got m={m}, d={d}, r={rank}"
        )));
    }
    Ok(())
}

fn check_input(s: &Session<'_>, x: Var, d: usize) -> Result<()> {
    let xv = s.graph.value(x);
    if xv.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "lora forward",
            lhs: xv.shape().to_vec(),
            rhs: vec![d],
        });
    }
    Ok(())
}
