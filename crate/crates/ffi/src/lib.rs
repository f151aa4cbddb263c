//! C interface to `pft-core`.
//!
//! Models and retrieval reports cross the boundary as opaque handles that the
//! caller frees with the matching `*_free` function. Every fallible call
//! returns a [`PftStatus`]; on failure a message is kept per thread and can be
//! read with [`pft_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use pft_core::eval::{evaluate_with, RetrievalReport};
use pft_core::model::ModelConfig;
use pft_core::{checkpoint, Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PftStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Divergence = 5,
    Checkpoint = 6,
    Io = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct PftModel {
    inner: pft_core::model::PftModel,
}

/// Opaque retrieval report handle.
pub struct PftReport {
    inner: RetrievalReport,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> PftStatus {
    match err {
        Error::Config(_) => PftStatus::Config,
        Error::Data(_) => PftStatus::Data,
        Error::Divergence { .. } | Error::NonFinite(_) => PftStatus::Divergence,
        Error::Checkpoint(_) => PftStatus::Checkpoint,
        Error::Io { .. } => PftStatus::Io,
        Error::Shape { .. } | Error::InvalidArgument { .. } => PftStatus::InvalidArgument,
    }
}

/// Runs `f`, recording its error or panic.
fn guard(f: impl FnOnce() -> Result<(), (PftStatus, String)>) -> PftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PftStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PftStatus::Panic
        }
    }
}

fn core(err: Error) -> (PftStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (PftStatus, String) {
    (PftStatus::NullArgument, format!("{what} is NULL"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (PftStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (PftStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_config(json: *const c_char) -> Result<ModelConfig, (PftStatus, String)> {
    if json.is_null() {
        return Ok(ModelConfig::default());
    }
    serde_json::from_str(text(json, "config_json")?).map_err(|e| (PftStatus::Config, format!("config_json: {e}")))
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn pft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pft_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a freshly initialized model.
///
/// `config_json` is a model configuration object; NULL selects the defaults.
///
/// # Safety
/// `config_json` must be NULL or a valid NUL-terminated string and `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pft_model_new(
    config_json: *const c_char,
    num_ids: usize,
    seed: u64,
    out: *mut *mut PftModel,
) -> PftStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = model_config(config_json)?;
        let inner = pft_core::model::PftModel::new(&cfg, num_ids, seed).map_err(core)?;
        *out = Box::into_raw(Box::new(PftModel { inner }));
        Ok(())
    })
}

/// Loads a checkpoint written by `pft train` or [`pft_model_save`].
///
/// # Safety
/// `path` must be a valid NUL-terminated string, `config_json` NULL or one,
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pft_model_load(
    path: *const c_char,
    config_json: *const c_char,
    out: *mut *mut PftModel,
) -> PftStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = text(path, "path")?;
        let cfg = model_config(config_json)?;
        let tensors = checkpoint::load(Path::new(path)).map_err(core)?;
        let inner = pft_core::model::PftModel::from_tensors(&cfg, tensors).map_err(core)?;
        *out = Box::into_raw(Box::new(PftModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and `path` be a valid NUL-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn pft_model_save(model: *const PftModel, path: *const c_char) -> PftStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = text(path, "path")?;
        checkpoint::save(Path::new(path), m.inner.params().iter()).map_err(core)
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pft_model_free(model: *mut PftModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pft_model_feature_dim(model: *const PftModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.feature_dim())
}

/// Scalars per input image (`C·H·W`), or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pft_model_image_len(model: *const PftModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().patch.image_len())
}

/// Trainable scalar count, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pft_model_param_count(model: *const PftModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.param_count())
}

/// Embeds `count` planar `[C, H, W]` images stored back to back in `images`
/// and writes `count · feature_dim` values to `out`.
///
/// # Safety
/// `images` must hold `count · pft_model_image_len(model)` values and `out`
/// must have room for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn pft_model_embed(
    model: *const PftModel,
    images: *const f64,
    count: usize,
    out: *mut f64,
    out_len: usize,
) -> PftStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if images.is_null() {
            return Err(null("images"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = &m.inner.config().patch;
        let need = count * m.inner.feature_dim();
        if count == 0 || out_len < need {
            return Err((PftStatus::InvalidArgument, format!("need count > 0 and out_len >= {need}, got {count} and {out_len}")));
        }
        let data = std::slice::from_raw_parts(images, count * p.image_len()).to_vec();
        let batch = Tensor::new(&[count, p.channels, p.height, p.width], data).map_err(core)?;
        let emb = m.inner.embed(&batch).map_err(core)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(emb.data());
        Ok(())
    })
}

/// Single-query retrieval evaluation of a row-major `nq × ng` distance
/// matrix.
///
/// # Safety
/// `dist` must hold `nq · ng` values, the id and camera arrays `nq` or `ng`
/// values as named, and `out` must be a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pft_evaluate(
    dist: *const f64,
    nq: usize,
    ng: usize,
    q_ids: *const usize,
    g_ids: *const usize,
    q_cams: *const usize,
    g_cams: *const usize,
    max_rank: usize,
    exclude_same_camera: bool,
    out: *mut *mut PftReport,
) -> PftStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        for (p, what) in [(q_ids, "q_ids"), (g_ids, "g_ids"), (q_cams, "q_cams"), (g_cams, "g_cams")] {
            if p.is_null() {
                return Err(null(what));
            }
        }
        if dist.is_null() {
            return Err(null("dist"));
        }
        let d = Tensor::new(&[nq, ng], std::slice::from_raw_parts(dist, nq * ng).to_vec()).map_err(core)?;
        let s = |p: *const usize, n: usize| std::slice::from_raw_parts(p, n);
        let inner = evaluate_with(&d, s(q_ids, nq), s(g_ids, ng), s(q_cams, nq), s(g_cams, ng), max_rank, exclude_same_camera)
            .map_err(core)?;
        *out = Box::into_raw(Box::new(PftReport { inner }));
        Ok(())
    })
}

/// Mean average precision, or NaN for NULL.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pft_report_map(report: *const PftReport) -> f64 {
    report.as_ref().map_or(f64::NAN, |r| r.inner.map)
}

/// Number of CMC entries, or 0 for NULL.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pft_report_cmc_len(report: *const PftReport) -> usize {
    report.as_ref().map_or(0, |r| r.inner.cmc.len())
}

/// Copies the CMC curve into `out`, which must hold `len >= cmc_len` values.
///
/// # Safety
/// `report` must be a live handle and `out` must have room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn pft_report_cmc(report: *const PftReport, out: *mut f64, len: usize) -> PftStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cmc = &r.inner.cmc;
        if len < cmc.len() {
            return Err((PftStatus::InvalidArgument, format!("len {len} is shorter than the CMC curve ({})", cmc.len())));
        }
        std::slice::from_raw_parts_mut(out, cmc.len()).copy_from_slice(cmc);
        Ok(())
    })
}

/// Queries left out for lack of a valid match, or 0 for NULL.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pft_report_excluded(report: *const PftReport) -> usize {
    report.as_ref().map_or(0, |r| r.inner.excluded_queries)
}

/// # Safety
/// `report` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pft_report_free(report: *mut PftReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
