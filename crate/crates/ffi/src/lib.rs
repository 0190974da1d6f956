//! C ABI over the forecaster: opaque model and dataset handles, integer
//! status codes and a per-thread last-error message.
//!
//! Every function returns a [`PanetStatus`]; on failure the message is kept
//! until the next call on the same thread and can be copied out with
//! [`panet_last_error`]. Handles are created by `*_load`/`*_open`/`*_synthetic`
//! and must be released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use panet::cli::load_data;
use panet::engine::{forecast_dataset, load_checkpoint, save_checkpoint, PaNet, WindowDataset};
use panet::error::Error;
use panet::field_store::{categorize, generate_synthetic};
use panet::verification::report;

/// Windows forecast per batch inside [`panet_forecast`] and [`panet_evaluate`].
const BATCH: usize = 8;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PanetStatus {
    Ok = 0,
    NullPointer = 1,
    /// A string argument is not valid UTF-8.
    InvalidUtf8 = 2,
    Io = 3,
    /// Malformed or truncated file, bad magic or unsupported version.
    Format = 4,
    Config = 5,
    ConfigMismatch = 6,
    Domain = 7,
    Numeric = 8,
    Divergence = 9,
    /// The caller's output buffer is shorter than required.
    BufferTooSmall = 10,
    Panic = 11,
}

/// Trained forecaster.
pub struct PanetModel {
    model: PaNet,
}

/// Sliding-window view over gridded sequences.
pub struct PanetDataset {
    data: WindowDataset,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> PanetStatus {
    match e {
        Error::Io(_) => PanetStatus::Io,
        Error::MagicMismatch { .. }
        | Error::UnsupportedVersion(_)
        | Error::Truncated { .. }
        | Error::Format(_)
        | Error::DimensionOverflow(_) => PanetStatus::Format,
        Error::Config(_) => PanetStatus::Config,
        Error::ConfigMismatch(_) => PanetStatus::ConfigMismatch,
        Error::Domain(_) => PanetStatus::Domain,
        Error::Numeric(_) => PanetStatus::Numeric,
        Error::Divergence { .. } => PanetStatus::Divergence,
    }
}

struct Failure(PanetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PanetStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, records any failure and converts panics into [`PanetStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PanetStatus {
    set_error(String::new());
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PanetStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PanetStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(PanetStatus::InvalidUtf8, format!("path is not UTF-8: {e}")))?;
    Ok(PathBuf::from(s))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn model_ref<'a>(m: *const PanetModel) -> Result<&'a PanetModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn dataset_ref<'a>(d: *const PanetDataset) -> Result<&'a PanetDataset, Failure> {
    d.as_ref().ok_or_else(|| null("dataset"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn panet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated and
/// NUL-terminated) and returns the buffer length needed for the whole
/// message, including the terminator. `buf` may be null when `len` is 0.
///
/// # Safety
/// `buf` must be valid for `len` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn panet_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Intensity category index (0 RL .. 4 RS) of a rain rate in mm/h.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn panet_categorize(rain_mm_h: f64, out: *mut u8) -> PanetStatus {
    guard(|| {
        let c = categorize(rain_mm_h)?;
        write_out(out, c.index() as u8, "out")
    })
}

/// Loads a model or training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn panet_model_load(path: *const c_char, out: *mut *mut PanetModel) -> PanetStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let model = load_checkpoint(path)?.into_model();
        out.write(Box::into_raw(Box::new(PanetModel { model })));
        Ok(())
    })
}

/// Writes the model weights and configuration as a model checkpoint.
///
/// # Safety
/// `model` must come from [`panet_model_load`]; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn panet_model_save(model: *const PanetModel, path: *const c_char) -> PanetStatus {
    guard(|| {
        let m = model_ref(model)?;
        save_checkpoint(path_arg(path)?, &m.model)?;
        Ok(())
    })
}

/// Look-back frames, horizon, input channels and patch size of the model.
/// Any output pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn panet_model_dims(
    model: *const PanetModel,
    lookback: *mut usize,
    horizon: *mut usize,
    channels: *mut usize,
    patch: *mut usize,
) -> PanetStatus {
    guard(|| {
        let c = &model_ref(model)?.model.config;
        for (out, v) in [(lookback, c.lookback), (horizon, c.horizon), (channels, c.channels), (patch, c.patch)] {
            if !out.is_null() {
                out.write(v);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn panet_model_free(model: *mut PanetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn boxed_dataset(data: WindowDataset, out: *mut *mut PanetDataset) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    // SAFETY: checked non-null; the caller guarantees validity
    unsafe { out.write(Box::into_raw(Box::new(PanetDataset { data }))) };
    Ok(())
}

/// Opens a `.pang` container, or every `.pang` file in a directory in
/// name order, as windows of `lookback` inputs and `horizon` targets.
///
/// # Safety
/// `path` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn panet_dataset_open(
    path: *const c_char,
    lookback: usize,
    horizon: usize,
    out: *mut *mut PanetDataset,
) -> PanetStatus {
    guard(|| {
        let seqs = load_data(&path_arg(path)?)?;
        boxed_dataset(WindowDataset::new(seqs, lookback, horizon)?, out)
    })
}

/// Synthetic storm sequences of `frames x height x width x channels`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn panet_dataset_synthetic(
    seed: u64,
    sequences: usize,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    tail_exponent: f64,
    lookback: usize,
    horizon: usize,
    out: *mut *mut PanetDataset,
) -> PanetStatus {
    guard(|| {
        let seqs = generate_synthetic(seed, sequences, (frames, height, width, channels), tail_exponent)?;
        boxed_dataset(WindowDataset::new(seqs, lookback, horizon)?, out)
    })
}

/// Window count and grid extent. Any output pointer may be null.
///
/// # Safety
/// `data` must be a live handle; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn panet_dataset_dims(
    data: *const PanetDataset,
    windows: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> PanetStatus {
    guard(|| {
        let d = &dataset_ref(data)?.data;
        let (h, w, _) = d.grid();
        for (out, v) in [(windows, d.len()), (height, h), (width, w)] {
            if !out.is_null() {
                out.write(v);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `data` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn panet_dataset_free(data: *mut PanetDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Category forecasts for every window, `(windows, horizon, H, W)` row-major.
///
/// `len` is the capacity of `out`; when it is too small nothing is written,
/// `required` (if non-null) receives the needed length and
/// [`PanetStatus::BufferTooSmall`] is returned.
///
/// # Safety
/// Handles must be live; `out` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn panet_forecast(
    model: *const PanetModel,
    data: *const PanetDataset,
    out: *mut u8,
    len: usize,
    required: *mut usize,
) -> PanetStatus {
    guard(|| {
        let (m, d) = (model_ref(model)?, dataset_ref(data)?);
        let f = forecast_dataset(&m.model, &d.data, BATCH)?;
        let n = f.categories.len();
        if !required.is_null() {
            required.write(n);
        }
        if len < n {
            return Err(Failure(PanetStatus::BufferTooSmall, format!("need {n} bytes, have {len}")));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(f.categories.as_ptr(), out, n);
        Ok(())
    })
}

/// Mean category IoU and threat score of the model over the dataset.
///
/// # Safety
/// Handles must be live; outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn panet_evaluate(
    model: *const PanetModel,
    data: *const PanetDataset,
    mean_iou: *mut f64,
    mean_ts: *mut f64,
) -> PanetStatus {
    guard(|| {
        let (m, d) = (model_ref(model)?, dataset_ref(data)?);
        let f = forecast_dataset(&m.model, &d.data, BATCH)?;
        let r = report(&f.categories, &f.truth, f.windows, f.horizon)?;
        write_out(mean_iou, r.mean_iou(), "mean_iou")?;
        write_out(mean_ts, r.mean_ts(), "mean_ts")
    })
}
