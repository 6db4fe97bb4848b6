//! C ABI over `moelab`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`MoelabStatus`]; on failure the message is kept per thread and
//! can be copied out with [`moelab_last_error`]. Panics never unwind into C:
//! they are caught and reported as [`MoelabStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use moelab::convert::{certify, convert_model, probe_batches, Verdict};
use moelab::harness::{dense_from_config, LabConfig, Trainer};
use moelab::model::{load_checkpoint, save_checkpoint, BlockStack, CheckpointMeta};
use moelab::numkernel::Matrix;
use moelab::precision::{bf16_round, ulp_bf16};
use moelab::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoelabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Shape = 3,
    Argument = 4,
    Config = 5,
    Evaluation = 6,
    Structure = 7,
    Precondition = 8,
    Checkpoint = 9,
    NonFiniteLoss = 10,
    Io = 11,
    Json = 12,
    /// The caller's buffer is too small; the required size was reported.
    BufferTooSmall = 13,
    Panic = 14,
}

impl From<&Error> for MoelabStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => Self::Shape,
            Error::Argument(_) => Self::Argument,
            Error::Config(_) => Self::Config,
            Error::Evaluation(_) => Self::Evaluation,
            Error::Structure(_) => Self::Structure,
            Error::Precondition(_) => Self::Precondition,
            Error::Checkpoint(_) => Self::Checkpoint,
            Error::NonFiniteLoss { .. } => Self::NonFiniteLoss,
            Error::Io(_) => Self::Io,
            Error::Json(_) => Self::Json,
        }
    }
}

/// Equivalence verdict of [`moelab_verify`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoelabVerdict {
    Equivalent = 0,
    NearEquivalent = 1,
    NotEquivalent = 2,
}

/// Parsed lab configuration.
pub struct MoelabConfig(LabConfig);

/// A dense or MoE block stack.
pub struct MoelabModel(BlockStack);

/// Training state over an owned copy of a model.
pub struct MoelabTrainer(Trainer);

/// Losses of one training step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MoelabStepLoss {
    pub step: u64,
    pub total: f64,
    pub mse: f64,
    pub aux: f64,
    pub lr: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(MoelabStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(MoelabStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MoelabStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, records any failure and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MoelabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MoelabStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside moelab".into());
            MoelabStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MoelabStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to fit. Returns the full message length
/// in bytes (excluding the terminator).
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn moelab_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Parses a JSON lab config; fields it omits take their defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moelab_config_from_json(
    json: *const c_char,
    out: *mut *mut MoelabConfig,
) -> MoelabStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        put(out, MoelabConfig(LabConfig::from_json(text)?))
    })
}

/// # Safety
/// `cfg` must be null or a handle from [`moelab_config_from_json`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn moelab_config_free(cfg: *mut MoelabConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Builds the dense base model described by the config.
///
/// # Safety
/// `cfg` must be a live config handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moelab_model_dense(
    cfg: *const MoelabConfig,
    out: *mut *mut MoelabModel,
) -> MoelabStatus {
    guard(|| {
        let cfg = obj(cfg, "config")?;
        put(out, MoelabModel(dense_from_config(&cfg.0)?))
    })
}

/// Converts a dense model into an MoE model under the config's conversion
/// and gate sections.
///
/// # Safety
/// `dense` and `cfg` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moelab_model_convert(
    dense: *const MoelabModel,
    cfg: *const MoelabConfig,
    out: *mut *mut MoelabModel,
) -> MoelabStatus {
    guard(|| {
        let dense = obj(dense, "dense model")?;
        let cfg = obj(cfg, "config")?;
        put(
            out,
            MoelabModel(convert_model(&dense.0, &cfg.0.conversion_config())?),
        )
    })
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moelab_model_load(
    dir: *const c_char,
    out: *mut *mut MoelabModel,
) -> MoelabStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        put(out, MoelabModel(load_checkpoint(&dir)?.0))
    })
}

/// Writes a checkpoint directory.
///
/// # Safety
/// `model` must be a live handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn moelab_model_save(
    model: *const MoelabModel,
    dir: *const c_char,
    seed: u64,
) -> MoelabStatus {
    guard(|| {
        let model = obj(model, "model")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let meta = CheckpointMeta {
            seed,
            ..CheckpointMeta::default()
        };
        Ok(save_checkpoint(&dir, &model.0, &meta)?)
    })
}

/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn moelab_model_free(model: *mut MoelabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Hidden width, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn moelab_model_hidden_dim(model: *const MoelabModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.hidden_dim)
}

/// Total parameter count, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn moelab_model_param_count(model: *const MoelabModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.param_count())
}

/// Runs the model on `n_tokens` row-major tokens of the model's hidden width,
/// writing `n_tokens × hidden` outputs. Models with a cross-attention gate
/// need encoder states and are rejected here.
///
/// # Safety
/// `tokens` must point to `n_tokens × hidden` readable values and `out` to as
/// many writable ones.
#[no_mangle]
pub unsafe extern "C" fn moelab_model_forward(
    model: *const MoelabModel,
    tokens: *const f64,
    n_tokens: usize,
    out: *mut f64,
) -> MoelabStatus {
    guard(|| {
        let model = obj(model, "model")?;
        if tokens.is_null() || out.is_null() {
            return Err(null("token buffer"));
        }
        let len = n_tokens * model.0.hidden_dim;
        let x = Matrix::from_vec(
            n_tokens,
            model.0.hidden_dim,
            std::slice::from_raw_parts(tokens, len).to_vec(),
        )?;
        let y = model.0.forward(&x, None)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Certifies `moe` against `dense` on `probes` seeded batches of `tokens`
/// tokens each.
///
/// # Safety
/// Handles must be live; `max_abs_dev` and `verdict` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moelab_verify(
    dense: *const MoelabModel,
    moe: *const MoelabModel,
    probes: usize,
    tokens: usize,
    seed: u64,
    max_abs_dev: *mut f64,
    verdict: *mut MoelabVerdict,
) -> MoelabStatus {
    guard(|| {
        let dense = obj(dense, "dense model")?;
        let moe = obj(moe, "moe model")?;
        if max_abs_dev.is_null() || verdict.is_null() {
            return Err(null("output pointer"));
        }
        if probes == 0 || tokens == 0 {
            return Err(Error::Argument("probes and tokens must be positive".into()).into());
        }
        let batches = probe_batches(probes, tokens, dense.0.hidden_dim, seed);
        let cert = certify(&dense.0, &moe.0, &batches)?;
        *max_abs_dev = cert.max_abs_dev;
        *verdict = match cert.verdict {
            Verdict::Equivalent => MoelabVerdict::Equivalent,
            Verdict::NearEquivalent => MoelabVerdict::NearEquivalent,
            Verdict::NotEquivalent => MoelabVerdict::NotEquivalent,
        };
        Ok(())
    })
}

/// Starts training a copy of `model` under `cfg`.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moelab_trainer_new(
    model: *const MoelabModel,
    cfg: *const MoelabConfig,
    out: *mut *mut MoelabTrainer,
) -> MoelabStatus {
    guard(|| {
        let model = obj(model, "model")?;
        let cfg = obj(cfg, "config")?;
        put(
            out,
            MoelabTrainer(Trainer::new(model.0.clone(), cfg.0.clone())?),
        )
    })
}

/// Runs one optimization step.
///
/// # Safety
/// `trainer` must be a live handle; `loss` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn moelab_trainer_step(
    trainer: *mut MoelabTrainer,
    loss: *mut MoelabStepLoss,
) -> MoelabStatus {
    guard(|| {
        let t = trainer.as_mut().ok_or_else(|| null("trainer"))?;
        let row = t.0.step()?;
        if !loss.is_null() {
            *loss = MoelabStepLoss {
                step: row.step as u64,
                total: row.total,
                mse: row.mse,
                aux: row.aux,
                lr: row.lr,
            };
        }
        Ok(())
    })
}

/// Copies the trainer's current model into a new handle.
///
/// # Safety
/// `trainer` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moelab_trainer_model(
    trainer: *const MoelabTrainer,
    out: *mut *mut MoelabModel,
) -> MoelabStatus {
    guard(|| {
        let t = obj(trainer, "trainer")?;
        put(out, MoelabModel(t.0.stack.clone()))
    })
}

/// Writes the routing-health report of the steps so far as NUL-terminated
/// JSON into `buf`. `written` receives the JSON length; when it does not fit,
/// nothing is written and [`MoelabStatus::BufferTooSmall`] is returned.
///
/// # Safety
/// `trainer` must be a live handle; `buf` null or `len` writable bytes;
/// `written` writable.
#[no_mangle]
pub unsafe extern "C" fn moelab_trainer_report_json(
    trainer: *mut MoelabTrainer,
    buf: *mut c_char,
    len: usize,
    written: *mut usize,
) -> MoelabStatus {
    guard(|| {
        let t = trainer.as_mut().ok_or_else(|| null("trainer"))?;
        if written.is_null() {
            return Err(null("written"));
        }
        t.0.flush();
        let json = serde_json::to_string(&t.0.report()?).map_err(Error::from)?;
        *written = json.len();
        if buf.is_null() || json.len() >= len {
            return Err(Failure(
                MoelabStatus::BufferTooSmall,
                format!("report needs {} bytes", json.len() + 1),
            ));
        }
        ptr::copy_nonoverlapping(json.as_ptr().cast::<c_char>(), buf, json.len());
        *buf.add(json.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `trainer` must be null or a live trainer handle.
#[no_mangle]
pub unsafe extern "C" fn moelab_trainer_free(trainer: *mut MoelabTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Nearest bfloat16 value (ties to even; subnormals flush to zero).
#[no_mangle]
pub extern "C" fn moelab_bf16_round(x: f64) -> f64 {
    bf16_round(x).value()
}

/// Spacing of the bfloat16 grid at `|x|`.
#[no_mangle]
pub extern "C" fn moelab_ulp_bf16(x: f64) -> f64 {
    ulp_bf16(x).spacing
}
