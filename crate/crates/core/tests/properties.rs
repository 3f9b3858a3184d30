//! Invariants checked over generated inputs.

use more_kit::autograd::{softmax_rows, Graph};
use more_kit::bench::diagnostics::spearman;
use more_kit::lora::LoraAdapter;
use more_kit::more::{allocation_histogram, ste_select, MoreFlags, MoreLayer, Selection};
use more_kit::params::{ParamSet, Session};
use more_kit::rng::{stream, Stream};
use more_kit::sampler::compute_weights;
use more_kit::Tensor;
use proptest::prelude::*;

fn layer(width: usize, rank: usize, tasks: usize, selection: Selection, seed: u64) -> (ParamSet, MoreLayer) {
    let mut rng = stream(seed, Stream::Adapters, 0);
    let mut params = ParamSet::new();
    let lora = LoraAdapter::init_random(&mut params, "s", width, width, rank, &mut rng).unwrap();
    let flags = MoreFlags {
        linear_scaling: true,
        selection,
    };
    let layer = MoreLayer::init(&mut params, "s", lora, tasks, tasks, 4, flags, &mut rng).unwrap();
    params.set(layer.adapter.b, Tensor::randn(width, rank, 1.0, &mut rng)).unwrap();
    params.set(layer.gate.weight, Tensor::randn(rank, 4, 2.0, &mut rng)).unwrap();
    (params, layer)
}

fn forward(layer: &MoreLayer, params: &ParamSet, x: &Tensor, task: usize) -> Tensor {
    let mut layer = layer.clone();
    let mut s = Session::new(params);
    let xv = s.graph.constant(x.clone());
    let y = layer.forward(&mut s, xv, task).unwrap();
    s.graph.value(y).clone()
}

proptest! {
    #[test]
    fn balanced_weights_form_an_order_preserving_distribution(
        sizes in prop::collection::vec(1usize..1_000_000, 1..10)
    ) {
        let w = compute_weights(&sizes).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..sizes.len() {
            prop_assert!(w[i] > 0.0);
            for j in 0..sizes.len() {
                if sizes[i] >= sizes[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn ste_multiplier_is_one_with_one_hot_gradient(
        logits in prop::collection::vec(-20.0f64..20.0, 1..12)
    ) {
        let mut g = Graph::new();
        let z = g.param(Tensor::row(&logits));
        let p = g.softmax(z, 1.0).unwrap();
        let rank = g.value(p).argmax() + 1;
        let m = ste_select(&mut g, p, rank).unwrap();
        prop_assert_eq!(g.value(m).data(), &[1.0][..]);
        g.backward(m).unwrap();
        let grad = g.grad(p).unwrap().data().to_vec();
        for (i, v) in grad.iter().enumerate() {
            prop_assert_eq!(*v, if i + 1 == rank { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn freezing_the_mapping_preserves_outputs(
        seed in 0u64..1000, rank in 1usize..7, tasks in 1usize..5, rows in 1usize..4
    ) {
        let (params, gated) = layer(8, rank, tasks, Selection::Ste, seed);
        let mut frozen = gated.clone();
        frozen.freeze_mapping(&params).unwrap();
        let x = Tensor::randn(rows, 8, 1.0, &mut stream(seed, Stream::Data, 0));
        for t in 0..tasks {
            prop_assert_eq!(forward(&gated, &params, &x, t), forward(&frozen, &params, &x, t));
        }
    }

    #[test]
    fn hard_selection_modes_agree_in_the_forward_pass(
        seed in 0u64..1000, rank in 1usize..7, tasks in 1usize..5
    ) {
        let (params, ste) = layer(8, rank, tasks, Selection::Ste, seed);
        let mut detached = ste.clone();
        detached.flags.selection = Selection::Detached;
        let x = Tensor::randn(3, 8, 1.0, &mut stream(seed, Stream::Data, 0));
        for t in 0..tasks {
            prop_assert_eq!(forward(&ste, &params, &x, t), forward(&detached, &params, &x, t));
        }
    }

    #[test]
    fn soft_selection_with_a_saturated_gate_matches_hard(
        seed in 0u64..1000, rank in 1usize..7, pick in 0usize..7
    ) {
        let pick = pick % rank;
        let (mut params, ste) = layer(8, rank, 2, Selection::Ste, seed);
        params.set(ste.gate.weight, Tensor::zeros(rank, 4)).unwrap();
        let mut bias = vec![0.0; rank];
        bias[pick] = 1000.0;
        params.set(ste.gate.bias, Tensor::row(&bias)).unwrap();
        let mut soft = ste.clone();
        soft.flags.selection = Selection::Soft;
        let x = Tensor::randn(2, 8, 1.0, &mut stream(seed, Stream::Data, 0));
        let (a, b) = (forward(&ste, &params, &x, 0), forward(&soft, &params, &x, 0));
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-10 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn allocation_rows_sum_to_layer_count(
        seed in 0u64..1000, rank in 1usize..7, tasks in 1usize..5, count in 1usize..5
    ) {
        let mut rng = stream(seed, Stream::Adapters, 0);
        let mut params = ParamSet::new();
        let layers: Vec<MoreLayer> = (0..count)
            .map(|i| {
                let name = format!("s{i}");
                let lora = LoraAdapter::init_random(&mut params, &name, 8, 8, rank, &mut rng).unwrap();
                MoreLayer::init(&mut params, &name, lora, tasks, tasks, 4, MoreFlags::default(), &mut rng).unwrap()
            })
            .collect();
        let refs: Vec<&MoreLayer> = layers.iter().collect();
        let h = allocation_histogram(&refs, &params).unwrap();
        prop_assert_eq!(h.len(), tasks);
        for row in &h {
            prop_assert_eq!(row.len(), rank);
            prop_assert_eq!(row.iter().sum::<u64>(), count as u64);
        }
    }

    #[test]
    fn spearman_is_bounded_and_symmetric(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 2..20)
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let rho = spearman(&x, &y).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
        prop_assert!((rho - spearman(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_shift_invariant_distributions(
        values in prop::collection::vec(-50.0f64..50.0, 2..10), shift in -100.0f64..100.0
    ) {
        let a = softmax_rows(&Tensor::row(&values), 1.0);
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let b = softmax_rows(&Tensor::row(&shifted), 1.0);
        prop_assert!((a.sum() - 1.0).abs() < 1e-12);
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }
}
