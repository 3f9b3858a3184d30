//! Finite-difference checks of every autograd op and of the whole model.

mod common;

use common::{check_model, check_op, differentiable_roles, op_cases, randomized_model};
use more_kit::more::Selection;
use more_kit::transformer::AdapterMode;

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..20 {
        for case in op_cases(seed) {
            let r = check_op(&case);
            assert!(r.passes(1e-4), "{} seed {seed}: {r:?}", case.name);
            assert!(r.checked > 0);
        }
    }
}

#[test]
fn soft_selection_model_matches_central_differences() {
    for seed in 0..5 {
        let mut m = randomized_model(AdapterMode::More, Selection::Soft, seed);
        let r = check_model(&mut m, &differentiable_roles(Selection::Soft), 2, seed);
        assert!(r.passes(1e-3), "seed {seed}: {r:?}");
    }
}

#[test]
fn ste_model_lora_factors_match_central_differences() {
    for seed in 0..5 {
        let mut m = randomized_model(AdapterMode::More, Selection::Ste, seed);
        let r = check_model(&mut m, &differentiable_roles(Selection::Ste), 3, seed);
        assert!(r.passes(1e-3), "seed {seed}: {r:?}");
    }
}

#[test]
fn fixed_lora_model_matches_central_differences() {
    let mut m = randomized_model(AdapterMode::LoraFixed, Selection::Ste, 7);
    let r = check_model(&mut m, &differentiable_roles(Selection::Ste), 3, 7);
    assert!(r.passes(1e-3), "{r:?}");
}
