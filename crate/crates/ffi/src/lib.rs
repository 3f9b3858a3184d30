//! C ABI over `more-kit`.
//!
//! Models are opaque `MkModel` handles created by [`mk_model_load`] and
//! released with [`mk_model_free`]. Every fallible call returns an
//! [`MkStatus`]; on failure [`mk_last_error`] describes what went wrong on the
//! calling thread. Strings returned by the library are freed with
//! [`mk_string_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use more_kit::audit::{audit, budget, BudgetInputs, Method};
use more_kit::checkpoint::{self, Manifest};
use more_kit::error::Error;
use more_kit::sampler::compute_weights;
use more_kit::transformer::{Model, Site};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    Io = 4,
    Panic = 5,
}

/// Budget formula selector for [`mk_budget`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MkMethod {
    Lora = 0,
    Multilora = 1,
    Mixlora = 2,
    Moelora = 3,
    More = 4,
}

/// Inputs to [`mk_budget`]; `n` of 0 means "not given".
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MkBudgetInputs {
    pub layers: u64,
    pub rank: u64,
    pub m: u64,
    pub d: u64,
    pub n: u64,
    pub tasks: u64,
    pub embed_dim: u64,
}

/// A loaded model plus the manifest it came from.
pub struct MkModel {
    model: Model,
    manifest: Manifest,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("NULs removed")));
}

fn status_of(err: &Error) -> MkStatus {
    match err {
        Error::NonFinite { .. } | Error::Divergence { .. } | Error::ZeroNorm(_) => MkStatus::Numerical,
        Error::Io(_) | Error::Checkpoint(_) => MkStatus::Io,
        _ => MkStatus::InvalidArgument,
    }
}

/// Run `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (MkStatus, String)>) -> MkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MkStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {msg}"));
            MkStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (MkStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MkStatus, String) {
    (MkStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (MkStatus, String) {
    (MkStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (MkStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const MkModel) -> Result<&'a MkModel, (MkStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn model_mut<'a>(m: *mut MkModel) -> Result<&'a mut MkModel, (MkStatus, String)> {
    m.as_mut().ok_or_else(|| null("model"))
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Load the checkpoint directory `dir` into `*out`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mk_model_load(dir: *const c_char, out: *mut *mut MkModel) -> MkStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = path_arg(dir)?;
        let (model, manifest) = checkpoint::load(&dir).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MkModel { model, manifest }));
        Ok(())
    })
}

/// Release a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`mk_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mk_model_free(model: *mut MkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Write the model as a checkpoint directory.
///
/// # Safety
/// `model` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mk_model_save(model: *const MkModel, dir: *const c_char) -> MkStatus {
    guard(|| {
        let m = model_ref(model)?;
        let dir = path_arg(dir)?;
        checkpoint::save(&dir, &m.model, &m.manifest.config, m.manifest.seed, m.manifest.rng.clone())
            .map_err(lib_err)?;
        Ok(())
    })
}

/// Number of tasks, vocabulary size and sequence length.
///
/// # Safety
/// `model` must be a live handle; output pointers may be NULL to skip.
#[no_mangle]
pub unsafe extern "C" fn mk_model_dims(
    model: *const MkModel,
    num_tasks: *mut usize,
    vocab_size: *mut usize,
    seq_len: *mut usize,
) -> MkStatus {
    guard(|| {
        let m = model_ref(model)?;
        let cfg = m.model.config();
        if let Some(t) = num_tasks.as_mut() {
            *t = m.manifest.config.tasks.len();
        }
        if let Some(v) = vocab_size.as_mut() {
            *v = cfg.vocab_size;
        }
        if let Some(s) = seq_len.as_mut() {
            *s = cfg.seq_len;
        }
        Ok(())
    })
}

/// Distribution over the vocabulary at the last position of one input.
/// `task < 0` runs without a task (only valid for non-MoRE models).
///
/// # Safety
/// `tokens` must hold `len` values and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mk_model_predict(
    model: *mut MkModel,
    tokens: *const u32,
    len: usize,
    task: i64,
    out: *mut f64,
    out_len: usize,
) -> MkStatus {
    guard(|| {
        let m = model_mut(model)?;
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let vocab = m.model.config().vocab_size;
        if out_len != vocab {
            return Err(invalid(format!("out_len must equal the vocabulary size {vocab}")));
        }
        if len == 0 {
            return Err(invalid("empty input"));
        }
        let input: Vec<usize> = std::slice::from_raw_parts(tokens, len).iter().map(|&t| t as usize).collect();
        let task = (task >= 0).then_some(task as usize);
        let probs = m.model.predict(&[input], task).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(probs.row_slice(len - 1));
        Ok(())
    })
}

/// Rank (1-based) the MoRE site at `layer`/`site` uses for `task`. Sites are
/// numbered q=0, k=1, v=2, o=3, wi=4, wo=5.
///
/// # Safety
/// `model` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mk_model_selected_rank(
    model: *const MkModel,
    layer: usize,
    site: usize,
    task: usize,
    out: *mut usize,
) -> MkStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let site = *Site::ALL.get(site).ok_or_else(|| invalid("site index must be 0..6"))?;
        let block = m
            .model
            .backbone
            .blocks
            .get(layer)
            .ok_or_else(|| invalid(format!("layer {layer} out of range")))?;
        let more = block
            .site(site)
            .as_more()
            .ok_or_else(|| invalid("site has no MoRE adapter"))?;
        *out = more.selected_rank(&m.model.params, task).map_err(lib_err)?;
        Ok(())
    })
}

/// Replace every gate by its task→rank lookup table.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mk_model_freeze(model: *mut MkModel) -> MkStatus {
    guard(|| {
        let m = model_mut(model)?;
        m.model.freeze_mapping().map_err(lib_err)?;
        Ok(())
    })
}

/// Parameter audit as a JSON string; free it with [`mk_string_free`].
///
/// # Safety
/// `model` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mk_model_audit_json(model: *const MkModel, out: *mut *mut c_char) -> MkStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let json = serde_json::to_string(&audit(&m.model)).map_err(|e| invalid(e.to_string()))?;
        *out = CString::new(json).map_err(|e| invalid(e.to_string()))?.into_raw();
        Ok(())
    })
}

/// Free a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Closed-form trainable-parameter budget.
///
/// # Safety
/// `inputs` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mk_budget(method: MkMethod, inputs: *const MkBudgetInputs, out: *mut u64) -> MkStatus {
    guard(|| {
        let x = inputs.as_ref().ok_or_else(|| null("inputs"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let method = match method {
            MkMethod::Lora => Method::Lora,
            MkMethod::Multilora => Method::Multilora,
            MkMethod::Mixlora => Method::Mixlora,
            MkMethod::Moelora => Method::Moelora,
            MkMethod::More => Method::More,
        };
        let inputs = BudgetInputs {
            layers: x.layers,
            rank: x.rank,
            m: x.m,
            d: x.d,
            n: (x.n > 0).then_some(x.n),
            tasks: x.tasks,
            embed_dim: x.embed_dim,
        };
        *out = budget(method, &inputs).map_err(lib_err)?;
        Ok(())
    })
}

/// Size-aware task sampling weights for `n` dataset sizes, written to `out`.
///
/// # Safety
/// `sizes` and `out` must each hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn mk_balanced_weights(sizes: *const u64, n: usize, out: *mut f64) -> MkStatus {
    guard(|| {
        if sizes.is_null() || out.is_null() {
            return Err(null("sizes/out"));
        }
        let sizes: Vec<usize> = std::slice::from_raw_parts(sizes, n).iter().map(|&s| s as usize).collect();
        let w = compute_weights(&sizes).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&w);
        Ok(())
    })
}
