//! C interface: load trained models behind an opaque handle, score images,
//! and compute metrics.
//!
//! Every function returns an [`LsrStatus`]. On failure the message is kept
//! per thread and can be read with [`lsr_last_error`]. Output pointers are
//! written only on success. Panics are caught and reported as
//! `LSR_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use latent_restore::cli::{load_config, load_scoring_models, ScoringModels};
use latent_restore::eval::{self, ScoredSet};
use latent_restore::image::{Image, Mask};
use latent_restore::prior::{ConditioningContext, NllMap};
use latent_restore::scoring::{self, AnomalyMap};
use latent_restore::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LsrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    MissingInput = 4,
    MissingDependency = 5,
    DimensionMismatch = 6,
    NonFinite = 7,
    OutOfRange = 8,
    SingleClass = 9,
    NoPositives = 10,
    Format = 11,
    Io = 12,
    Internal = 99,
}

impl From<&Error> for LsrStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => LsrStatus::InvalidArgument,
            Error::InvalidConfig(_) => LsrStatus::InvalidConfig,
            Error::MissingInput(_) => LsrStatus::MissingInput,
            Error::MissingDependency(_) => LsrStatus::MissingDependency,
            Error::DimensionMismatch(_) => LsrStatus::DimensionMismatch,
            Error::NonFinite(_) | Error::Divergence { .. } | Error::ZeroVariance(_) => LsrStatus::NonFinite,
            Error::IndexOutOfRange(_) | Error::OutOfBounds(_) => LsrStatus::OutOfRange,
            Error::SingleClass(_) => LsrStatus::SingleClass,
            Error::NoPositives => LsrStatus::NoPositives,
            Error::Format(_) | Error::Json(_) => LsrStatus::Format,
            Error::Io(_) => LsrStatus::Io,
        }
    }
}

/// Trained models and thresholds loaded from a model directory.
pub struct LsrScorer {
    models: ScoringModels,
    side: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(LsrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(LsrStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(LsrStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LsrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LsrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            LsrStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn path_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a Path, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(Path::new)
        .map_err(|_| Failure(LsrStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn write<T>(ptr: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    ptr.write(value);
    Ok(())
}

unsafe fn image_arg(pixels: *const f64, height: usize, width: usize) -> Result<Image, Failure> {
    let n = height
        .checked_mul(width)
        .ok_or_else(|| Failure(LsrStatus::InvalidArgument, "image size overflows".into()))?;
    Ok(Image::new(height, width, slice(pixels, n, "pixels")?.to_vec())?)
}

unsafe fn write_map(out: *mut f64, map: &AnomalyMap) {
    if !out.is_null() {
        std::ptr::copy_nonoverlapping(map.values().as_ptr(), out, map.values().len());
    }
}

/// Message for the most recent failure on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lsr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lsr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load the VQ-VAE, prior and VAE checkpoints (and calibrated thresholds, if
/// present) from `models_dir`. `config_path` may be null for the default
/// configuration; checkpoints must have been trained under the same config.
///
/// # Safety
/// `models_dir` and a non-null `config_path` must be NUL-terminated strings;
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn lsr_scorer_open(
    models_dir: *const c_char,
    config_path: *const c_char,
    out: *mut *mut LsrScorer,
) -> LsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = path_arg(models_dir, "models_dir")?;
        let config = if config_path.is_null() {
            None
        } else {
            Some(path_arg(config_path, "config_path")?)
        };
        let cfg = load_config(config, None)?;
        let models = load_scoring_models(&cfg, dir)?;
        let side = models.codec.config().image_side;
        write(out, Box::into_raw(Box::new(LsrScorer { models, side })), "out")
    })
}

/// Release a scorer. Null is ignored.
///
/// # Safety
/// `scorer` must come from [`lsr_scorer_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lsr_scorer_free(scorer: *mut LsrScorer) {
    if !scorer.is_null() {
        drop(Box::from_raw(scorer));
    }
}

/// Side length of the square images the scorer accepts.
///
/// # Safety
/// `scorer` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lsr_scorer_image_side(scorer: *const LsrScorer, out: *mut usize) -> LsrStatus {
    guard(|| {
        let s = scorer.as_ref().ok_or_else(|| null("scorer"))?;
        write(out, s.side, "out")
    })
}

/// Sample-wise score and pixel-wise anomaly map of one slice by latent
/// restoration. `slice_position` lies in [-0.5, 0.5]; `seed` fixes the
/// restoration draws. `map_out` may be null, otherwise it receives
/// `height * width` values in row-major order.
///
/// # Safety
/// `pixels` must hold `height * width` values; `map_out`, if non-null, room
/// for as many; `sample_score_out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lsr_score_image(
    scorer: *const LsrScorer,
    pixels: *const f64,
    height: usize,
    width: usize,
    slice_position: f64,
    seed: u64,
    sample_score_out: *mut f64,
    map_out: *mut f64,
) -> LsrStatus {
    guard(|| {
        let s = scorer.as_ref().ok_or_else(|| null("scorer"))?;
        if sample_score_out.is_null() {
            return Err(null("sample_score_out"));
        }
        let image = image_arg(pixels, height, width)?;
        let ctx = ConditioningContext::new(slice_position)?;
        let m = &s.models;
        let r = scoring::score_image(&image, &m.codec, &m.prior, ctx, &m.scoring, seed)?;
        write_map(map_out, &r.map);
        write(sample_score_out, r.sample_score, "sample_score_out")
    })
}

/// VAE baseline: sample score (the VAE loss) and smoothed residual map.
///
/// # Safety
/// As for [`lsr_score_image`].
#[no_mangle]
pub unsafe extern "C" fn lsr_baseline_score(
    scorer: *const LsrScorer,
    pixels: *const f64,
    height: usize,
    width: usize,
    sample_score_out: *mut f64,
    map_out: *mut f64,
) -> LsrStatus {
    guard(|| {
        let s = scorer.as_ref().ok_or_else(|| null("scorer"))?;
        if sample_score_out.is_null() {
            return Err(null("sample_score_out"));
        }
        let image = image_arg(pixels, height, width)?;
        let (score, map) = scoring::vae_scores(&image, &s.models.vae)?;
        write_map(map_out, &map);
        write(sample_score_out, score, "sample_score_out")
    })
}

/// Sum of the NLL entries strictly above `lambda_s`.
///
/// # Safety
/// `nll` must hold `len` values; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lsr_sample_score(nll: *const f64, len: usize, lambda_s: f64, out: *mut f64) -> LsrStatus {
    guard(|| {
        let values = slice(nll, len, "nll")?.to_vec();
        let map = NllMap::new(1, len, values)?;
        write(out, scoring::sample_score(&map, lambda_s), "out")
    })
}

/// 3x3 minimum then 7x7 mean filter of a non-negative map.
///
/// # Safety
/// `map` and `out` must each hold `height * width` values.
#[no_mangle]
pub unsafe extern "C" fn lsr_smooth(map: *const f64, height: usize, width: usize, out: *mut f64) -> LsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = AnomalyMap::new(image_arg(map, height, width)?)?;
        write_map(out, &scoring::smooth(&m));
        Ok(())
    })
}

unsafe fn scored_set(scores: *const f64, labels: *const u8, len: usize) -> Result<ScoredSet, Failure> {
    let s = slice(scores, len, "scores")?.to_vec();
    let l = slice(labels, len, "labels")?.iter().map(|&b| b != 0).collect();
    Ok(ScoredSet::new(s, l)?)
}

/// Area under the ROC curve; ties count one half. Labels are 0 or non-zero.
///
/// # Safety
/// `scores` and `labels` must hold `len` values; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lsr_auroc(scores: *const f64, labels: *const u8, len: usize, out: *mut f64) -> LsrStatus {
    guard(|| {
        let set = scored_set(scores, labels, len)?;
        write(out, eval::auroc(&set)?, "out")
    })
}

/// Step-wise average precision with tied scores grouped.
///
/// # Safety
/// As for [`lsr_auroc`].
#[no_mangle]
pub unsafe extern "C" fn lsr_average_precision(
    scores: *const f64,
    labels: *const u8,
    len: usize,
    out: *mut f64,
) -> LsrStatus {
    guard(|| {
        let set = scored_set(scores, labels, len)?;
        write(out, eval::average_precision(&set)?, "out")
    })
}

/// Dice overlap of two binary masks of `len` pixels (two empty masks give 1).
///
/// # Safety
/// `pred` and `truth` must hold `len` bytes; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lsr_dice(pred: *const u8, truth: *const u8, len: usize, out: *mut f64) -> LsrStatus {
    guard(|| {
        let to_mask = |p: &[u8]| Mask::new(1, len, p.iter().map(|&b| b != 0).collect());
        let a = to_mask(slice(pred, len, "pred")?)?;
        let b = to_mask(slice(truth, len, "truth")?)?;
        write(out, eval::dice(&a, &b)?, "out")
    })
}

/// Best Dice over thresholds taken from the map's values (prediction is
/// `map >= threshold`); ties keep the lowest threshold.
///
/// # Safety
/// `map` and `truth` must hold `len` values; both outputs valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lsr_best_dice(
    map: *const f64,
    truth: *const u8,
    len: usize,
    threshold_out: *mut f64,
    dice_out: *mut f64,
) -> LsrStatus {
    guard(|| {
        if threshold_out.is_null() || dice_out.is_null() {
            return Err(null("output"));
        }
        let m = slice(map, len, "map")?;
        let t = Mask::new(1, len, slice(truth, len, "truth")?.iter().map(|&b| b != 0).collect())?;
        let (threshold, dice) = eval::best_dice(m, &t)?;
        write(threshold_out, threshold, "threshold_out")?;
        write(dice_out, dice, "dice_out")
    })
}
