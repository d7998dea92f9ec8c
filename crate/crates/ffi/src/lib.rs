//! C interface: load a checkpoint, load or parse dialog records, score and
//! evaluate them.
//!
//! Every function returns an [`FgaStatus`]. On failure a description is kept
//! per thread and can be read with [`fga_last_error`]. Handles are opaque and
//! must be released with their `_free` function. Panics never cross the
//! boundary; they are reported as [`FgaStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fga::harness::{evaluate, load_dataset, parse_record_json, DialogRecord};
use fga::model::{Checkpoint, Model};
use fga::FgaError;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FgaStatus {
    Ok = 0,
    /// A required pointer was null or a string was not UTF-8.
    NullArgument = 1,
    /// Invalid argument or configuration.
    InvalidArgument = 2,
    /// Malformed data, checkpoint or file error.
    Data = 3,
    /// Shape mismatch or non-finite values.
    Numeric = 4,
    /// The output buffer is too small; the required length was written.
    BufferTooSmall = 5,
    /// Internal error (caught panic).
    Panic = 6,
}

/// A loaded model, ready for eval-mode scoring.
pub struct FgaModel {
    model: Model,
}

/// Records loaded against a model's vocabulary and dimensions.
pub struct FgaDataset {
    records: Vec<DialogRecord>,
}

/// Retrieval metrics; recalls are percentages.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FgaEvalSummary {
    pub mrr: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mean_rank: f64,
    pub records: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let text = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

fn status_of(err: &FgaError) -> FgaStatus {
    match err.exit_code() {
        1 => FgaStatus::InvalidArgument,
        2 => FgaStatus::Data,
        _ => FgaStatus::Numeric,
    }
}

struct Failure(FgaStatus, String);

impl From<FgaError> for Failure {
    fn from(e: FgaError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(FgaStatus::NullArgument, format!("`{what}` is null"))
}

/// Runs `f`, translating errors and panics into a status.
fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> FgaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FgaStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let detail = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {detail}"));
            FgaStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` is null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(FgaStatus::NullArgument, format!("`{what}` is not valid UTF-8")))
}

/// Last error message on this thread, or null after a successful call.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fga_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn fga_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint manifest (its `.bin` blob must sit next to it).
///
/// # Safety
/// `path` is a NUL-terminated string; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn fga_model_load(path: *const c_char, out: *mut *mut FgaModel) -> FgaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let model = Checkpoint::load(Path::new(path))?.to_model()?;
        *out = Box::into_raw(Box::new(FgaModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle from [`fga_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fga_model_free(model: *mut FgaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Candidates per record expected by the model.
///
/// # Safety
/// `model` is a live handle; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn fga_model_num_candidates(model: *const FgaModel, out: *mut usize) -> FgaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.model.config.dims.candidates;
        Ok(())
    })
}

/// Number of trainable scalars.
///
/// # Safety
/// `model` is a live handle; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn fga_model_num_parameters(model: *const FgaModel, out: *mut usize) -> FgaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.model.num_parameters();
        Ok(())
    })
}

/// Loads a JSONL dataset using the model's vocabulary and dimensions.
///
/// # Safety
/// `model` is a live handle, `path` a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fga_dataset_load(model: *const FgaModel, path: *const c_char, out: *mut *mut FgaDataset) -> FgaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let records = load_dataset(Path::new(path), &m.model.vocab, &m.model.config.dims)?;
        *out = Box::into_raw(Box::new(FgaDataset { records }));
        Ok(())
    })
}

/// # Safety
/// `dataset` is null or a handle from [`fga_dataset_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fga_dataset_free(dataset: *mut FgaDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` is a live handle; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn fga_dataset_len(dataset: *const FgaDataset, out: *mut usize) -> FgaStatus {
    guard(|| {
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = d.records.len();
        Ok(())
    })
}

fn write_probs(probs: &[f64], out: *mut f64, capacity: usize, written: *mut usize) -> Result<(), Failure> {
    // SAFETY: callers pass `written` from the C side; null is rejected here.
    let written = unsafe { written.as_mut() }.ok_or_else(|| null("written"))?;
    *written = probs.len();
    if capacity < probs.len() {
        return Err(Failure(
            FgaStatus::BufferTooSmall,
            format!("{} candidates do not fit in a buffer of {capacity}", probs.len()),
        ));
    }
    if out.is_null() {
        return Err(null("out"));
    }
    // SAFETY: `out` holds at least `capacity >= probs.len()` values.
    unsafe { std::ptr::copy_nonoverlapping(probs.as_ptr(), out, probs.len()) };
    Ok(())
}

/// Eval-mode candidate probabilities of record `index`.
///
/// `written` receives the candidate count, also when the buffer is too small.
///
/// # Safety
/// Handles are live; `out` holds `capacity` doubles; `written` is writable.
#[no_mangle]
pub unsafe extern "C" fn fga_model_score(
    model: *const FgaModel,
    dataset: *const FgaDataset,
    index: usize,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> FgaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let record = d.records.get(index).ok_or_else(|| {
            Failure(
                FgaStatus::InvalidArgument,
                format!("record {index} out of range for {} records", d.records.len()),
            )
        })?;
        let probs = m.model.predict_probs(std::slice::from_ref(record))?.remove(0);
        write_probs(&probs, out, capacity, written)
    })
}

/// As [`fga_model_score`] for one record given as a JSON object (dataset line format).
///
/// # Safety
/// `model` is live; `record_json` is NUL-terminated; `out` holds `capacity`
/// doubles; `written` is writable.
#[no_mangle]
pub unsafe extern "C" fn fga_model_score_json(
    model: *const FgaModel,
    record_json: *const c_char,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> FgaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let line = str_arg(record_json, "record_json")?;
        let record = parse_record_json(line, &m.model.vocab, &m.model.config.dims, Path::new("."))?;
        let probs = m.model.predict_probs(std::slice::from_ref(&record))?.remove(0);
        write_probs(&probs, out, capacity, written)
    })
}

/// Ranks every record and fills `out` with the metrics.
///
/// # Safety
/// Handles are live; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn fga_model_evaluate(model: *const FgaModel, dataset: *const FgaDataset, out: *mut FgaEvalSummary) -> FgaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let report = evaluate(&m.model, &d.records, false, 1)?;
        *out = FgaEvalSummary {
            mrr: report.mrr,
            r1: report.r1,
            r5: report.r5,
            r10: report.r10,
            mean_rank: report.mean_rank,
            records: report.ranks.len(),
        };
        Ok(())
    })
}
