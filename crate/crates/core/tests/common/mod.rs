#![allow(dead_code)]

use more_kit::autograd::{Axis, Graph, Var};
use more_kit::bench::train::batch_loss;
use more_kit::config::TrainingConfig;
use more_kit::gradcheck::{check, check_params, GradCheck, DEFAULT_STEP};
use more_kit::more::{MoreFlags, Selection};
use more_kit::objectives::{contrastive_loss, generation_loss, ContrastiveSign};
use more_kit::params::{ParamId, ParamRole};
use more_kit::rng::{stream, Stream};
use more_kit::transformer::{AdapterMode, AdapterSpec, BackboneConfig, Model};
use more_kit::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

/// `Σ out ⊙ w` with a fixed random `w`, so every output entry matters.
fn reduce(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor>,
    out_shape: (usize, usize),
    rng: &mut ChaCha8Rng,
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    let w = Tensor::randn(out_shape.0, out_shape.1, 1.0, rng);
    OpCase {
        name,
        inputs,
        f: Box::new(move |g, v| {
            let out = op(g, v)?;
            reduce(g, out, &w)
        }),
    }
}

fn positive(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(rows, cols, 1.0, rng).map(|x| x + 1.5)
}

/// One instance of every differentiable op, drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let n = |rows, cols, r: &mut ChaCha8Rng| Tensor::randn(rows, cols, 1.0, r);
    let mut cases = Vec::new();
    cases.push(case("matmul", vec![n(3, 4, r), n(4, 2, r)], (3, 2), r, |g, v| g.matmul(v[0], v[1])));
    cases.push(case("transpose", vec![n(3, 4, r)], (4, 3), r, |g, v| g.transpose(v[0])));
    cases.push(case("add", vec![n(3, 4, r), n(3, 4, r)], (3, 4), r, |g, v| g.add(v[0], v[1])));
    cases.push(case("sub", vec![n(3, 4, r), n(3, 4, r)], (3, 4), r, |g, v| g.sub(v[0], v[1])));
    cases.push(case("mul", vec![n(3, 4, r), n(3, 4, r)], (3, 4), r, |g, v| g.mul(v[0], v[1])));
    cases.push(case("scale", vec![n(3, 4, r)], (3, 4), r, |g, v| g.scale(v[0], -1.7)));
    cases.push(case("neg", vec![n(3, 4, r)], (3, 4), r, |g, v| g.neg(v[0])));
    cases.push(case("mul_scalar", vec![n(3, 4, r), n(1, 1, r)], (3, 4), r, |g, v| g.mul_scalar(v[0], v[1])));
    cases.push(case("mul_row", vec![n(3, 4, r), n(1, 4, r)], (3, 4), r, |g, v| g.mul_row(v[0], v[1])));
    cases.push(case("add_row", vec![n(3, 4, r), n(1, 4, r)], (3, 4), r, |g, v| g.add_row(v[0], v[1])));
    cases.push(case("exp", vec![n(3, 4, r)], (3, 4), r, |g, v| g.exp(v[0])));
    cases.push(case("log", vec![positive(3, 4, r)], (3, 4), r, |g, v| g.log(v[0])));
    cases.push(case("softmax", vec![n(3, 5, r)], (3, 5), r, |g, v| g.softmax(v[0], 0.7)));
    cases.push(case("log_softmax", vec![n(3, 5, r)], (3, 5), r, |g, v| g.log_softmax(v[0], 0.3)));
    cases.push(case("row_range", vec![n(5, 3, r)], (2, 3), r, |g, v| g.row_range(v[0], 2, 2)));
    cases.push(case("col_range", vec![n(3, 5, r)], (3, 2), r, |g, v| g.col_range(v[0], 1, 2)));
    cases.push(case("slice_rows", vec![n(5, 3, r)], (3, 3), r, |g, v| g.slice_rows(v[0], 3)));
    cases.push(case("slice_cols", vec![n(3, 5, r)], (3, 2), r, |g, v| g.slice_cols(v[0], 2)));
    cases.push(case("concat_rows", vec![n(2, 3, r), n(1, 3, r)], (3, 3), r, |g, v| {
        g.concat_rows(&[v[0], v[1]])
    }));
    cases.push(case("concat_cols", vec![n(3, 2, r), n(3, 1, r)], (3, 3), r, |g, v| {
        g.concat_cols(&[v[0], v[1]])
    }));
    cases.push(case("select_rows", vec![n(4, 3, r)], (5, 3), r, |g, v| g.select_rows(v[0], &[3, 0, 3, 1, 1])));
    cases.push(case("gather", vec![positive(3, 4, r)], (3, 1), r, |g, v| g.gather(v[0], &[2, 0, 3])));
    cases.push(case("stop_gradient", vec![n(3, 4, r), n(3, 4, r)], (3, 4), r, |g, v| {
        // sg(b) - b has value 0 on both sides, so any gradient leaking
        // through the stop shows up as a mismatch.
        let d = g.stop_gradient(v[1])?;
        let copy = g.constant(g.value(v[1]).clone());
        let zero = g.sub(d, copy)?;
        let prod = g.mul(v[0], v[1])?;
        g.add(prod, zero)
    }));
    cases.push(case("sum", vec![n(3, 4, r)], (1, 1), r, |g, v| g.sum(v[0])));
    cases.push(case("mean", vec![n(3, 4, r)], (1, 1), r, |g, v| g.mean(v[0])));
    cases.push(case("mean_rows", vec![n(3, 4, r)], (1, 4), r, |g, v| g.mean_axis(v[0], Axis::Rows)));
    cases.push(case("mean_cols", vec![n(3, 4, r)], (3, 1), r, |g, v| g.mean_axis(v[0], Axis::Cols)));
    cases.push(case("cosine_similarity", vec![n(4, 5, r), n(3, 5, r)], (4, 3), r, |g, v| {
        g.cosine_similarity(v[0], v[1])
    }));
    cases.push(case("layer_norm", vec![n(3, 6, r)], (3, 6), r, |g, v| g.layer_norm(v[0])));
    cases.push(case("gelu", vec![n(3, 4, r)], (3, 4), r, |g, v| g.gelu(v[0])));
    let task = r.random_range(0..3);
    cases.push(OpCase {
        name: "contrastive_loss",
        inputs: vec![n(4, 6, r), n(3, 6, r)],
        f: Box::new(move |g, v| contrastive_loss(g, v[0], task, v[1], 0.5, ContrastiveSign::InfoNce)),
    });
    let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
    cases.push(OpCase {
        name: "generation_loss",
        inputs: vec![n(4, 5, r)],
        f: Box::new(move |g, v| {
            let p = g.softmax(v[0], 1.0)?;
            generation_loss(g, p, &targets)
        }),
    });
    cases
}

/// Floor on the relative-error denominator: entries whose gradient is below
/// it are judged on absolute error.
pub const GRAD_FLOOR: f64 = 1e-5;

pub fn check_op(case: &OpCase) -> GradCheck {
    check(&case.inputs, DEFAULT_STEP, GRAD_FLOOR, &case.f).expect(case.name)
}

/// The 2-layer, width-16 model with every adapter parameter randomized so
/// that no gradient is trivially zero.
pub fn randomized_model(mode: AdapterMode, selection: Selection, seed: u64) -> Model {
    let spec = AdapterSpec {
        mode,
        rank: 4,
        num_tasks: 3,
        embed_dim: 16,
        alpha: 1.0,
        flags: MoreFlags {
            linear_scaling: true,
            selection,
        },
        shared_embedding: false,
    };
    let config = BackboneConfig {
        seq_len: 4,
        ..BackboneConfig::default()
    };
    let mut model = Model::build(&config, &spec, seed).unwrap();
    let mut rng = stream(seed, Stream::Data, 99);
    let ids: Vec<(ParamId, ParamRole)> = model.params.iter().map(|(id, p)| (id, p.role)).collect();
    for (id, role) in ids {
        if role == ParamRole::LoraB || role == ParamRole::LoraA {
            let t = model.params.get_mut(id);
            let fresh = Tensor::randn(t.rows(), t.cols(), 0.3, &mut rng);
            t.data_mut().copy_from_slice(fresh.data());
        }
    }
    model
}

/// End-to-end check of the total loss on a random batch. `roles` selects
/// which parameters are probed; `per_param` entries are sampled from each.
pub fn check_model(model: &mut Model, roles: &[ParamRole], per_param: usize, seed: u64) -> GradCheck {
    let mut rng = stream(seed, Stream::Data, 100);
    let vocab = model.config().vocab_size;
    let seq = model.config().seq_len;
    let tokens: Vec<Vec<usize>> = (0..2)
        .map(|_| (0..seq).map(|_| rng.random_range(0..vocab)).collect())
        .collect();
    let targets: Vec<usize> = (0..2).map(|_| rng.random_range(0..vocab)).collect();
    let task = rng.random_range(0..3);
    let mut entries = Vec::new();
    for (id, p) in model.params.iter() {
        if roles.contains(&p.role) {
            for _ in 0..per_param {
                entries.push((id, rng.random_range(0..p.value.len())));
            }
        }
    }
    let training = TrainingConfig {
        tau: 0.5,
        ..TrainingConfig::default()
    };
    let Model { params, backbone } = model;
    check_params(params, &entries, DEFAULT_STEP, GRAD_FLOOR, |s| {
        Ok(batch_loss(s, backbone, &tokens, &targets, task, &training, ContrastiveSign::InfoNce)?.total)
    })
    .unwrap()
}

/// Trainable roles whose true gradient exists under each selection mode:
/// with the straight-through estimator the gate and the embeddings receive a
/// surrogate gradient that finite differences cannot see.
pub fn differentiable_roles(selection: Selection) -> Vec<ParamRole> {
    match selection {
        Selection::Soft => vec![
            ParamRole::LoraA,
            ParamRole::LoraB,
            ParamRole::TaskEmbedding,
            ParamRole::GateWeight,
            ParamRole::GateBias,
        ],
        _ => vec![ParamRole::LoraA, ParamRole::LoraB],
    }
}
