//! C ABI over the airstreams library.
//!
//! Objects are opaque handles created by `as_*_load`/`as_*_new` functions and
//! released with the matching `as_*_free`. Every fallible function returns an
//! [`AsStatus`]; on failure a message for the calling thread is available from
//! [`as_last_error`] until the next failing call on that thread. Panics never
//! cross the boundary: they are reported as `AS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use airstreams::checkpoint;
use airstreams::experiment::{run_training, ExperimentConfig};
use airstreams::synthdata::{generate_dataset, DataConfig, Dataset, Split};
use airstreams::tensor::Tensor;
use airstreams::towers::Model;
use airstreams::training::{evaluate_report, Metric, TrainConfig};
use airstreams::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsStatus {
    Ok = 0,
    /// Inconsistent configuration or hyperparameters.
    Config = 1,
    /// Malformed caller data: arguments, labels, files.
    Input = 2,
    /// API used out of order.
    Usage = 3,
    /// NaN or infinity during computation.
    Numeric = 4,
    /// Dataset or checkpoint on disk is incomplete or inconsistent.
    Integrity = 5,
    Io = 6,
    /// A required pointer argument was null.
    NullPointer = 7,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 8,
    /// Internal panic; the library state is unaffected but the call failed.
    Panic = 9,
}

impl From<&Error> for AsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => AsStatus::Config,
            Error::Input(_) | Error::Json(_) => AsStatus::Input,
            Error::Usage(_) => AsStatus::Usage,
            Error::Numeric { .. } => AsStatus::Numeric,
            Error::Integrity(_) => AsStatus::Integrity,
            Error::Io { .. } => AsStatus::Io,
        }
    }
}

/// Dataset split selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsSplit {
    Train = 0,
    Val = 1,
}

/// Evaluation metric selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsMetric {
    Top1 = 0,
    Map = 1,
    MeanPerClass = 2,
}

/// A dataset loaded into memory.
pub struct AsDataset {
    inner: Dataset,
}

/// A trained model restored from a checkpoint.
pub struct AsModel {
    inner: Model<f32>,
}

/// Dimensions of a dataset's clips.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AsDatasetInfo {
    pub num_train: usize,
    pub num_val: usize,
    pub num_actions: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(AsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(AsStatus::from(&e), e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> AsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AsStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(AsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Outcome<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(AsStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Outcome<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Outcome<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn as_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn as_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes a synthetic dataset to `out_dir`.
///
/// # Safety
/// `out_dir` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn as_dataset_generate(
    out_dir: *const c_char,
    num_train: usize,
    num_val: usize,
    num_actions: usize,
    frames: usize,
    size: usize,
    seed: u64,
) -> AsStatus {
    guard(|| {
        let out = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let cfg = DataConfig {
            num_train,
            num_val,
            num_actions,
            frames,
            size,
            seed,
            magnitude: None,
        };
        generate_dataset(&cfg, &out)?;
        Ok(())
    })
}

/// Loads a dataset directory into a new handle stored in `*out`.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn as_dataset_load(dir: *const c_char, out: *mut *mut AsDataset) -> AsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let inner = Dataset::load(&dir)?;
        *out = Box::into_raw(Box::new(AsDataset { inner }));
        Ok(())
    })
}

/// Releases a dataset handle. NULL is ignored.
///
/// # Safety
/// `ds` must come from [`as_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn as_dataset_free(ds: *mut AsDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live dataset handle and `info` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn as_dataset_info(ds: *const AsDataset, info: *mut AsDatasetInfo) -> AsStatus {
    guard(|| {
        let m = &ref_arg(ds, "ds")?.inner.manifest;
        *out_arg(info, "info")? = AsDatasetInfo {
            num_train: m.num_train,
            num_val: m.num_val,
            num_actions: m.num_actions,
            frames: m.frames,
            height: m.height,
            width: m.width,
        };
        Ok(())
    })
}

/// Restores a model from a checkpoint directory (or a run directory holding
/// one) into a new handle stored in `*out`.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn as_model_load(dir: *const c_char, out: *mut *mut AsModel) -> AsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let mut dir = PathBuf::from(str_arg(dir, "dir")?);
        if dir.join(airstreams::experiment::CHECKPOINT_DIR).is_dir() {
            dir = dir.join(airstreams::experiment::CHECKPOINT_DIR);
        }
        let (inner, _) = checkpoint::load(&dir)?;
        *out = Box::into_raw(Box::new(AsModel { inner }));
        Ok(())
    })
}

/// Releases a model handle. NULL is ignored.
///
/// # Safety
/// `model` must come from [`as_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn as_model_free(model: *mut AsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of action classes the model predicts.
///
/// # Safety
/// `model` must be a live model handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn as_model_num_actions(model: *const AsModel, out: *mut usize) -> AsStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(model, "model")?.inner.config.num_actions;
        Ok(())
    })
}

/// RGB-only inference. `frames` holds `n` clips laid out `[n, T, 3, H, W]`
/// in `[0, 1]` (`frames_len` values); the merged-tower logits `[n, K]` are
/// written to `logits`, which must hold `logits_len >= n * K` values.
///
/// # Safety
/// `frames` must point to `frames_len` readable floats and `logits` to
/// `logits_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn as_model_predict(
    model: *const AsModel,
    frames: *const f32,
    frames_len: usize,
    n: usize,
    logits: *mut f32,
    logits_len: usize,
) -> AsStatus {
    guard(|| {
        let model = &ref_arg(model, "model")?.inner;
        if frames.is_null() {
            return Err(null("frames"));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        let c = &model.config;
        let want = n * c.frames * 3 * c.height * c.width;
        if n == 0 || frames_len != want {
            return Err(Failure(
                AsStatus::Input,
                format!("expected {want} frame values for {n} clips of [{}, 3, {}, {}], got {frames_len}", c.frames, c.height, c.width),
            ));
        }
        let k = c.num_actions;
        if logits_len < n * k {
            return Err(Failure(AsStatus::Input, format!("logits buffer holds {logits_len} values, need {}", n * k)));
        }
        let values = std::slice::from_raw_parts(frames, frames_len).to_vec();
        let clips = Tensor::new(vec![n, c.frames, 3, c.height, c.width], values)?;
        let p = model.predict(&clips)?;
        std::slice::from_raw_parts_mut(logits, n * k).copy_from_slice(&p.merged);
        Ok(())
    })
}

/// Scores the model's merged predictions on a dataset split.
///
/// # Safety
/// `model` and `ds` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn as_model_evaluate(
    model: *const AsModel,
    ds: *const AsDataset,
    split: AsSplit,
    metric: AsMetric,
    out: *mut f64,
) -> AsStatus {
    guard(|| {
        let model = &ref_arg(model, "model")?.inner;
        let ds = &ref_arg(ds, "ds")?.inner;
        let out = out_arg(out, "out")?;
        let k = ds.manifest.num_actions;
        if k != model.config.num_actions {
            return Err(Failure(
                AsStatus::Input,
                format!("model predicts {} actions, dataset has {k}", model.config.num_actions),
            ));
        }
        let split = match split {
            AsSplit::Train => Split::Train,
            AsSplit::Val => Split::Val,
        };
        let metric = match metric {
            AsMetric::Top1 => Metric::Top1,
            AsMetric::Map => Metric::Map,
            AsMetric::MeanPerClass => Metric::MeanPerClass,
        };
        let report = evaluate_report(model, ds.split(split), &TrainConfig::default())?;
        *out = report.metric(metric, k);
        Ok(())
    })
}

/// Trains a model on `ds` into the run directory `out_dir`. `config_json`
/// is an experiment configuration document, or NULL for the defaults. The
/// final merged validation top-1 is stored in `*val_top1` when non-NULL.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings or NULL where
/// allowed; `ds` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn as_train(
    config_json: *const c_char,
    ds: *const AsDataset,
    out_dir: *const c_char,
    val_top1: *mut f64,
) -> AsStatus {
    guard(|| {
        let cfg: ExperimentConfig = if config_json.is_null() {
            ExperimentConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)
                .map_err(|e| Failure(AsStatus::Config, format!("config: {e}")))?
        };
        let ds = &ref_arg(ds, "ds")?.inner;
        let out = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let outcome = run_training(&cfg, ds, &out, false)?;
        if let Some(v) = val_top1.as_mut() {
            *v = outcome.final_eval.acc_merged;
        }
        Ok(())
    })
}
