//! The C ABI exercised through its Rust declarations.

use std::ffi::{CStr, CString};
use std::ptr;

use more_kit::checkpoint;
use more_kit::config::RunConfig;
use more_kit::transformer::Model;
use more_kit_ffi::*;

const CONFIG: &str = r#"{
    "backbone": {"layers": 2, "width": 16, "heads": 2, "vocab_size": 32, "seq_len": 8},
    "adapter": {"mode": "more", "rank": 4},
    "tasks": [
        {"name": "a", "intrinsic_rank": 1, "train_size": 20, "eval_size": 10, "teacher_seed": 1,
         "prefix_token": 1, "content_tokens": [9, 32], "label_tokens": [5, 6]},
        {"name": "b", "intrinsic_rank": 2, "train_size": 20, "eval_size": 10, "teacher_seed": 2,
         "prefix_token": 2, "content_tokens": [9, 32], "label_tokens": [5, 6]}
    ]
}"#;

fn saved_checkpoint() -> (tempfile::TempDir, CString) {
    let config = RunConfig::from_json(CONFIG).unwrap();
    let model = Model::build(&config.backbone, &config.adapter_spec(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &model, &config, 3, None).unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    (dir, path)
}

fn last_error() -> String {
    let p = mk_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load(path: &CString) -> *mut MkModel {
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { mk_model_load(path.as_ptr(), &mut model) }, MkStatus::Ok);
    model
}

fn predict(model: *mut MkModel, tokens: &[u32], task: i64) -> Vec<f64> {
    let mut out = vec![0.0; 32];
    let status = unsafe { mk_model_predict(model, tokens.as_ptr(), tokens.len(), task, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, MkStatus::Ok);
    out
}

#[test]
fn load_query_freeze_and_save() {
    let (_dir, path) = saved_checkpoint();
    let model = load(&path);
    let (mut tasks, mut vocab, mut seq) = (0usize, 0usize, 0usize);
    assert_eq!(unsafe { mk_model_dims(model, &mut tasks, &mut vocab, &mut seq) }, MkStatus::Ok);
    assert_eq!((tasks, vocab, seq), (2, 32, 8));

    let tokens = [1u32, 10, 11, 12, 13, 14, 15, 0];
    let before = predict(model, &tokens, 1);
    assert!((before.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let mut rank = 0usize;
    assert_eq!(unsafe { mk_model_selected_rank(model, 1, 5, 1, &mut rank) }, MkStatus::Ok);
    assert!((1..=4).contains(&rank));

    assert_eq!(unsafe { mk_model_freeze(model) }, MkStatus::Ok);
    assert_eq!(predict(model, &tokens, 1), before);
    let mut frozen_rank = 0usize;
    assert_eq!(unsafe { mk_model_selected_rank(model, 1, 5, 1, &mut frozen_rank) }, MkStatus::Ok);
    assert_eq!(frozen_rank, rank);

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { mk_model_audit_json(model, &mut json) }, MkStatus::Ok);
    let audit: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(json) }.to_str().unwrap()).unwrap();
    unsafe { mk_string_free(json) };
    assert_eq!(audit["status"], "exact");
    assert_eq!(audit["frozen_mapping"], true);
    assert_eq!(audit["inference_effective"], 6 * 2 * 4 * 32);

    let out_dir = tempfile::tempdir().unwrap();
    let out_path = CString::new(out_dir.path().join("frozen").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mk_model_save(model, out_path.as_ptr()) }, MkStatus::Ok);
    unsafe { mk_model_free(model) };

    let reloaded = load(&out_path);
    assert_eq!(predict(reloaded, &tokens, 1), before);
    unsafe { mk_model_free(reloaded) };
}

#[test]
fn errors_map_to_status_codes() {
    let (_dir, path) = saved_checkpoint();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { mk_model_load(ptr::null(), &mut model) }, MkStatus::NullPointer);
    assert!(last_error().contains("null"));
    let missing = CString::new("/nonexistent/checkpoint").unwrap();
    assert_eq!(unsafe { mk_model_load(missing.as_ptr(), &mut model) }, MkStatus::Io);
    assert!(model.is_null());

    let model = load(&path);
    let tokens = [1u32, 10, 0];
    let mut out = vec![0.0; 5];
    let status = unsafe { mk_model_predict(model, tokens.as_ptr(), 3, 0, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, MkStatus::InvalidArgument);
    assert!(last_error().contains("vocabulary"));
    let mut out = vec![0.0; 32];
    let status = unsafe { mk_model_predict(model, tokens.as_ptr(), 3, 7, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, MkStatus::InvalidArgument);
    let mut rank = 0;
    assert_eq!(unsafe { mk_model_selected_rank(model, 0, 6, 0, &mut rank) }, MkStatus::InvalidArgument);
    assert_eq!(unsafe { mk_model_selected_rank(model, 9, 0, 0, &mut rank) }, MkStatus::InvalidArgument);
    unsafe { mk_model_free(model) };
    unsafe { mk_model_free(ptr::null_mut()) };
    assert_eq!(unsafe { mk_model_freeze(ptr::null_mut()) }, MkStatus::NullPointer);
}

#[test]
fn budgets_and_sampling_weights() {
    let inputs = MkBudgetInputs {
        layers: 12,
        rank: 8,
        m: 768,
        d: 768,
        n: 0,
        tasks: 8,
        embed_dim: 768,
    };
    let mut more = 0u64;
    assert_eq!(unsafe { mk_budget(MkMethod::More, &inputs, &mut more) }, MkStatus::Ok);
    let mut lora16 = 0u64;
    let doubled = MkBudgetInputs { rank: 16, ..inputs };
    assert_eq!(unsafe { mk_budget(MkMethod::Lora, &doubled, &mut lora16) }, MkStatus::Ok);
    assert_eq!(more, 1_769_472);
    assert_eq!(lora16, more);
    let mut x = 0u64;
    assert_eq!(unsafe { mk_budget(MkMethod::Mixlora, &inputs, &mut x) }, MkStatus::InvalidArgument);
    assert_eq!(unsafe { mk_budget(MkMethod::Lora, ptr::null(), &mut x) }, MkStatus::NullPointer);

    let sizes = [392_000u64, 2_500];
    let mut w = [0.0f64; 2];
    assert_eq!(unsafe { mk_balanced_weights(sizes.as_ptr(), 2, w.as_mut_ptr()) }, MkStatus::Ok);
    assert!((w[0] - 0.728_559_380_216_123_7).abs() < 1e-15);
    let empty = [0u64, 5];
    assert_eq!(unsafe { mk_balanced_weights(empty.as_ptr(), 2, w.as_mut_ptr()) }, MkStatus::InvalidArgument);
}

#[test]
fn generated_header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/more_kit.h")).unwrap();
    for name in [
        "mk_model_load",
        "mk_model_free",
        "mk_model_predict",
        "mk_model_freeze",
        "mk_budget",
        "mk_balanced_weights",
        "MK_STATUS_NULL_POINTER",
        "typedef struct MkModel MkModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
