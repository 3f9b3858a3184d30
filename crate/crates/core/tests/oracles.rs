//! Library results checked against independent oracles: SVD, brute-force
//! loops, high-precision constants and Monte Carlo.

use more_kit::autograd::Graph;
use more_kit::bench::tasks::{low_rank_delta, perturbations};
use more_kit::config::TaskSpec;
use more_kit::lora::LoraAdapter;
use more_kit::more::{MoreFlags, MoreLayer};
use more_kit::objectives::{contrastive_loss, generation_loss, ContrastiveSign};
use more_kit::params::{ParamSet, Session};
use more_kit::rng::{stream, Stream};
use more_kit::sampler::{compute_weights, weights_for, BalancedSampler, TaskRegistry, WeightScheme};
use more_kit::transformer::BackboneConfig;
use more_kit::Tensor;
use nalgebra::DMatrix;
use rand::Rng;

fn singular_values(t: &Tensor) -> Vec<f64> {
    let m = DMatrix::from_row_slice(t.rows(), t.cols(), t.data());
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Numerical rank: singular values above `1e-10 · σ_max`.
fn numerical_rank(t: &Tensor) -> usize {
    let s = singular_values(t);
    s.iter().filter(|&&v| v > 1e-10 * s[0]).count()
}

#[test]
fn planted_updates_have_exact_rank_and_norm() {
    let mut rng = stream(1, Stream::Teacher, 0);
    for k in 1..=8 {
        let w0 = Tensor::randn(16, 16, 0.25, &mut rng);
        let delta = low_rank_delta(&w0, k, 0.5, &mut rng).unwrap();
        let s = singular_values(&delta);
        // The best rank-(k-1) approximation leaves a real residual; rank k
        // leaves nothing.
        let residual_km1: f64 = s[k - 1..].iter().map(|v| v * v).sum::<f64>().sqrt();
        let residual_k: f64 = s[k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(residual_km1 > 1e-3 * s[0], "k={k}: {s:?}");
        assert!(residual_k < 1e-10 * s[0], "k={k}: {s:?}");
        let frob = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((frob - 0.5 * w0.frobenius_norm()).abs() < 1e-12 * frob);
    }
}

#[test]
fn teacher_perturbations_match_intrinsic_rank() {
    let config = BackboneConfig::default();
    for rank in [1, 2, 4, 8] {
        let spec = TaskSpec {
            intrinsic_rank: rank,
            ..task_spec()
        };
        let planted = perturbations(&config, &spec, 3).unwrap();
        assert_eq!(planted.len(), config.layers * 6);
        for p in &planted {
            assert_eq!(numerical_rank(&p.delta), rank);
        }
    }
}

fn task_spec() -> TaskSpec {
    serde_json::from_str(
        r#"{"name": "t", "intrinsic_rank": 1, "train_size": 10, "eval_size": 10, "teacher_seed": 5,
            "prefix_token": 1, "content_tokens": [9, 32], "label_tokens": [5, 6]}"#,
    )
    .unwrap()
}

#[test]
fn rank_prefix_update_has_rank_at_most_prefix() {
    let mut rng = stream(4, Stream::Adapters, 0);
    let mut params = ParamSet::new();
    let lora = LoraAdapter::init_random(&mut params, "s", 12, 12, 8, &mut rng).unwrap();
    params.set(lora.b, Tensor::randn(12, 8, 1.0, &mut rng)).unwrap();
    let x = Tensor::identity(12);
    for k in 1..=8 {
        let mut s = Session::new(&params);
        let xv = s.graph.constant(x.clone());
        let upd = lora.prefix_update(&mut s, xv, k).unwrap();
        assert_eq!(numerical_rank(s.graph.value(upd)), k);
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn contrastive_loss_matches_brute_force() {
    let mut rng = stream(7, Stream::Data, 0);
    for trial in 0..50 {
        let (n, t, h) = (rng.random_range(1..6), rng.random_range(2..6), rng.random_range(2..8));
        let task = rng.random_range(0..t);
        let tau = [0.05, 0.5, 1.0][trial % 3];
        let samples = Tensor::randn(n, h, 1.0, &mut rng);
        let table = Tensor::randn(t, h, 1.0, &mut rng);

        let mut expected = 0.0;
        for i in 0..n {
            let sims: Vec<f64> = (0..t).map(|k| cosine(samples.row_slice(i), table.row_slice(k)) / tau).collect();
            let denom: f64 = sims.iter().map(|s| s.exp()).sum();
            expected -= (sims[task].exp() / denom).ln();
        }
        expected /= n as f64;

        for (sign, want) in [(ContrastiveSign::InfoNce, expected), (ContrastiveSign::Literal, -expected)] {
            let mut g = Graph::new();
            let sv = g.constant(samples.clone());
            let tv = g.constant(table.clone());
            let loss = contrastive_loss(&mut g, sv, task, tv, tau, sign).unwrap();
            let got = g.value(loss).data()[0];
            assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "trial {trial}: {got} vs {want}");
        }
    }
}

#[test]
fn generation_loss_matches_brute_force() {
    let mut rng = stream(8, Stream::Data, 0);
    for _ in 0..50 {
        let (p, v) = (rng.random_range(1..6), rng.random_range(2..10));
        let logits = Tensor::randn(p, v, 1.5, &mut rng);
        let targets: Vec<usize> = (0..p).map(|_| rng.random_range(0..v)).collect();
        let mut expected = 0.0;
        for (row, &t) in targets.iter().enumerate() {
            let l = logits.row_slice(row);
            let z: f64 = l.iter().map(|x| x.exp()).sum();
            expected -= (l[t].exp() / z).ln();
        }
        expected /= p as f64;
        let mut g = Graph::new();
        let lv = g.constant(logits);
        let probs = g.softmax(lv, 1.0).unwrap();
        let loss = generation_loss(&mut g, probs, &targets).unwrap();
        let got = g.value(loss).data()[0];
        assert!((got - expected).abs() < 1e-12 * expected.max(1.0), "{got} vs {expected}");
    }
}

#[test]
fn gate_matches_brute_force_softmax_and_argmax() {
    let mut rng = stream(9, Stream::Adapters, 0);
    for trial in 0..100 {
        let (rank, h, tasks) = (rng.random_range(1..9), rng.random_range(1..6), rng.random_range(1..5));
        let mut params = ParamSet::new();
        let lora = LoraAdapter::init_random(&mut params, "s", 8, 8, rank, &mut rng).unwrap();
        let layer = MoreLayer::init(&mut params, "s", lora, tasks, tasks, h, MoreFlags::default(), &mut rng).unwrap();
        params.set(layer.gate.weight, Tensor::randn(rank, h, 1.0, &mut rng)).unwrap();
        params.set(layer.gate.bias, Tensor::randn(1, rank, 1.0, &mut rng)).unwrap();
        let w = params.get(layer.gate.weight).clone();
        let b = params.get(layer.gate.bias).clone();
        let table = params.get(layer.embeddings.table).clone();
        for task in 0..tasks {
            let e = table.row_slice(task);
            let logits: Vec<f64> = (0..rank)
                .map(|i| b.data()[i] + (0..h).map(|j| w.get(i, j) * e[j]).sum::<f64>())
                .collect();
            let mut best = 0;
            for i in 1..rank {
                if logits[i] > logits[best] {
                    best = i;
                }
            }
            let mut s = Session::new(&params);
            let out = layer.gate_forward(&mut s, task).unwrap();
            let p = s.graph.value(out.probs).data();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(out.rank, best + 1, "trial {trial}");
        }
    }
}

#[test]
#[allow(clippy::excessive_precision)]
fn balanced_weights_match_high_precision_values() {
    let cases: [(&[usize], &[f64]); 4] = [
        (&[392_000, 2_500], &[0.728_559_380_216_123_656_4, 0.271_440_619_783_876_343_6]),
        (
            &[2000, 1000, 500, 250],
            &[0.326_441_343_763_093_128_6, 0.250_030_676_001_988_995, 0.218_820_176_579_212_540_3, 0.204_707_803_655_705_336_2],
        ),
        (&[10, 1_000_000], &[0.268_945_353_587_509_096, 0.731_054_646_412_490_904]),
        (
            &[7, 13, 29, 101, 997],
            &[
                0.154_307_577_914_764_306_1,
                0.155_116_881_543_034_185,
                0.157_295_836_396_331_914_7,
                0.167_486_171_624_706_205_1,
                0.365_793_532_521_163_389_2,
            ],
        ),
    ];
    for (sizes, want) in cases {
        let got = compute_weights(sizes).unwrap();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{sizes:?}: {got:?}");
        }
    }
    assert_eq!(compute_weights(&[1, 1, 1]).unwrap(), vec![1.0 / 3.0; 3]);
}

#[test]
fn empirical_task_frequencies_match_weights() {
    let sizes = [2000usize, 1000, 500, 250];
    let mut registry = TaskRegistry::new(WeightScheme::Balanced);
    for (i, &n) in sizes.iter().enumerate() {
        registry.add(format!("t{i}"), vec![0u8; n]).unwrap();
    }
    let mut sampler = BalancedSampler::new(stream(11, Stream::Sampling, 0));
    let draws = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        counts[sampler.draw_task(&registry).unwrap()] += 1;
    }
    let l1: f64 = counts
        .iter()
        .zip(registry.weights())
        .map(|(&c, w)| (c as f64 / draws as f64 - w).abs())
        .sum();
    assert!(l1 < 0.01, "{counts:?} vs {:?}", registry.weights());
}

/// Balanced weights always sit between uniform and size-proportional: they
/// keep the size order, and the max/min ratio is bounded by both the
/// proportional ratio and `e`.
#[test]
fn balanced_weights_are_flatter_than_proportional() {
    let mut rng = stream(12, Stream::Data, 0);
    for _ in 0..1000 {
        let n = rng.random_range(2..8);
        let sizes: Vec<usize> = (0..n).map(|_| rng.random_range(1..100_000)).collect();
        let bal = compute_weights(&sizes).unwrap();
        let prop = weights_for(&sizes, WeightScheme::Proportional).unwrap();
        assert!((bal.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let ratio = |w: &[f64]| {
            w.iter().copied().fold(f64::MIN, f64::max) / w.iter().copied().fold(f64::MAX, f64::min)
        };
        assert!(ratio(&bal) <= ratio(&prop) * (1.0 + 1e-12));
        assert!(ratio(&bal) < std::f64::consts::E);
        for i in 0..n {
            for j in 0..n {
                if sizes[i] > sizes[j] {
                    assert!(bal[i] > bal[j]);
                }
            }
        }
    }
}
