//! C ABI over the `sqbox` library.
//!
//! Every fallible function returns a [`SqboxStatus`]; results travel through
//! out-pointers that are written only on success. Fitted objects are opaque
//! handles released with their `_free` function. The message of the most
//! recent failure on the calling thread is available from
//! [`sqbox_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sqbox::error::Error;
use sqbox::forest::{FeatureVector, ForestParams};
use sqbox::io::{FittedModel, ModelBundle};
use sqbox::multibox::{fit_bonferroni, fit_sbox, BoxInterval, PointSet};
use sqbox::quantile::{self, QuantileStrategy, ScoreList};
use sqbox::trajband::{fit_cte, fit_sqbox, BehaviorMatrix, SplitConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqboxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    DeltaInvalid = 3,
    DeltaTooSmall = 4,
    EmptyScores = 5,
    AllScalesZero = 6,
    BadSplit = 7,
    DimensionMismatch = 8,
    LengthMismatch = 9,
    InsufficientData = 10,
    Io = 11,
    Schema = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqboxStrategy {
    Strict = 0,
    UpperConfidence = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqboxMethod {
    Sqbox = 0,
    Cte = 1,
}

/// A selected order statistic.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqboxQuantile {
    pub value: f64,
    /// 1-based rank among the scores.
    pub rank: usize,
    pub guaranteed: bool,
}

/// Settings for [`sqbox_model_fit`]. Start from [`sqbox_fit_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqboxFitConfig {
    pub method: SqboxMethod,
    pub l: usize,
    /// Scale rows; ignored by the total-exceedance method.
    pub m: usize,
    pub delta: f64,
    /// Ignored by the total-exceedance method.
    pub delta_prime: f64,
    pub strategy: SqboxStrategy,
    pub ucb_confidence: f64,
    pub trees: usize,
    pub min_leaf: usize,
    pub seed: u64,
}

/// Fitted prediction box.
pub struct SqboxBox(BoxInterval);

/// Fitted trajectory band model.
pub struct SqboxModel(ModelBundle);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn status_of(e: &Error) -> SqboxStatus {
    match e {
        Error::DeltaTooSmall { .. } => SqboxStatus::DeltaTooSmall,
        Error::DeltaInvalid(_) => SqboxStatus::DeltaInvalid,
        Error::EmptyScores => SqboxStatus::EmptyScores,
        Error::AllScalesZero => SqboxStatus::AllScalesZero,
        Error::BadSplit(_) => SqboxStatus::BadSplit,
        Error::DimensionMismatch { .. } => SqboxStatus::DimensionMismatch,
        Error::LengthMismatch { .. } => SqboxStatus::LengthMismatch,
        Error::InsufficientData(_) => SqboxStatus::InsufficientData,
        Error::Io(_) => SqboxStatus::Io,
        Error::Schema(_) => SqboxStatus::Schema,
        _ => SqboxStatus::InvalidInput,
    }
}

struct Failure(SqboxStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SqboxStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SqboxStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(Failure(SqboxStatus::Panic, msg))
    });
    match outcome {
        Ok(()) => SqboxStatus::Ok,
        Err(Failure(status, msg)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = msg);
            status
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn strategy(kind: SqboxStrategy, confidence: f64) -> Result<QuantileStrategy, Failure> {
    Ok(match kind {
        SqboxStrategy::Strict => QuantileStrategy::Strict,
        SqboxStrategy::UpperConfidence => QuantileStrategy::upper_confidence(confidence)?,
    })
}

fn product(a: usize, b: usize) -> Result<usize, Failure> {
    a.checked_mul(b)
        .ok_or_else(|| Failure(SqboxStatus::InvalidInput, "size overflow".into()))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SqboxStatus::InvalidInput, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn sqbox_status_message(status: SqboxStatus) -> *const c_char {
    let s: &'static [u8] = match status {
        SqboxStatus::Ok => b"ok\0",
        SqboxStatus::NullPointer => b"null pointer argument\0",
        SqboxStatus::InvalidInput => b"invalid input\0",
        SqboxStatus::DeltaInvalid => b"delta outside (0, 1)\0",
        SqboxStatus::DeltaTooSmall => b"delta too small for the calibration size\0",
        SqboxStatus::EmptyScores => b"no scores\0",
        SqboxStatus::AllScalesZero => b"every scale estimate is zero\0",
        SqboxStatus::BadSplit => b"infeasible split\0",
        SqboxStatus::DimensionMismatch => b"dimension mismatch\0",
        SqboxStatus::LengthMismatch => b"length mismatch\0",
        SqboxStatus::InsufficientData => b"insufficient data\0",
        SqboxStatus::Io => b"i/o error\0",
        SqboxStatus::Schema => b"schema mismatch\0",
        SqboxStatus::BufferTooSmall => b"output buffer too small\0",
        SqboxStatus::Panic => b"internal panic\0",
    };
    s.as_ptr().cast()
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `capacity`, into `buf`. Returns the full message length
/// excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sqbox_last_error(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && capacity > 0 {
            let n = msg.len().min(capacity - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Conformal rank for `n_cal` calibration scores at miscoverage `delta`.
///
/// # Safety
/// `out_rank` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sqbox_conformal_index(
    n_cal: usize,
    delta: f64,
    out_rank: *mut usize,
) -> SqboxStatus {
    guard(|| {
        let o = out(out_rank, "out_rank")?;
        *o = quantile::conformal_index(n_cal, delta)?;
        Ok(())
    })
}

/// Conformal threshold of `scores`.
///
/// # Safety
/// `scores` must point to `n` readable doubles and `result` must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn sqbox_conformal_quantile(
    scores: *const f64,
    n: usize,
    delta: f64,
    kind: SqboxStrategy,
    ucb_confidence: f64,
    result: *mut SqboxQuantile,
) -> SqboxStatus {
    guard(|| {
        let s = ScoreList::new(slice(scores, n, "scores")?.to_vec())?;
        let o = out(result, "result")?;
        let est = quantile::conformal_quantile(&s, delta, strategy(kind, ucb_confidence)?)?;
        *o = SqboxQuantile {
            value: est.value,
            rank: est.rank,
            guaranteed: est.guaranteed,
        };
        Ok(())
    })
}

/// Upper confidence bound on the level-`q` quantile of the score law.
///
/// # Safety
/// As for [`sqbox_conformal_quantile`].
#[no_mangle]
pub unsafe extern "C" fn sqbox_quantile_ucb(
    scores: *const f64,
    n: usize,
    q: f64,
    confidence: f64,
    result: *mut SqboxQuantile,
) -> SqboxStatus {
    guard(|| {
        let s = ScoreList::new(slice(scores, n, "scores")?.to_vec())?;
        let o = out(result, "result")?;
        let est = quantile::quantile_ucb(&s, q, confidence)?;
        *o = SqboxQuantile {
            value: est.value,
            rank: est.rank,
            guaranteed: est.guaranteed,
        };
        Ok(())
    })
}

/// `P(Bin(n, p) <= k)`.
///
/// # Safety
/// `out_p` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sqbox_binomial_cdf(
    k: u64,
    n: u64,
    p: f64,
    out_p: *mut f64,
) -> SqboxStatus {
    guard(|| {
        if !(0.0..=1.0).contains(&p) {
            return Err(Failure(
                SqboxStatus::InvalidInput,
                format!("probability {p} outside [0, 1]"),
            ));
        }
        *out(out_p, "out_p")? = quantile::binomial_cdf(k, n, p);
        Ok(())
    })
}

unsafe fn point_set(points: *const f64, n: usize, d: usize) -> Result<PointSet, Failure> {
    Ok(PointSet::new(
        slice(points, product(n, d)?, "points")?.to_vec(),
        d,
    )?)
}

unsafe fn store<T>(handle: *mut *mut T, value: T) -> Result<(), Failure> {
    *out(handle, "handle")? = Box::into_raw(Box::new(value));
    Ok(())
}

/// Scaled prediction box from `n` row-major points of dimension `d`.
///
/// # Safety
/// `points` must hold `n * d` doubles; `handle` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sqbox_box_fit(
    points: *const f64,
    n: usize,
    d: usize,
    m: usize,
    delta: f64,
    kind: SqboxStrategy,
    ucb_confidence: f64,
    handle: *mut *mut SqboxBox,
) -> SqboxStatus {
    guard(|| {
        let pts = point_set(points, n, d)?;
        let fit = fit_sbox(&pts, m, delta, strategy(kind, ucb_confidence)?)?;
        store(handle, SqboxBox(fit))
    })
}

/// Per-coordinate Bonferroni box.
///
/// # Safety
/// As for [`sqbox_box_fit`].
#[no_mangle]
pub unsafe extern "C" fn sqbox_box_fit_bonferroni(
    points: *const f64,
    n: usize,
    d: usize,
    m: usize,
    delta: f64,
    handle: *mut *mut SqboxBox,
) -> SqboxStatus {
    guard(|| {
        let pts = point_set(points, n, d)?;
        store(handle, SqboxBox(fit_bonferroni(&pts, m, delta)?))
    })
}

/// Dimension of the box, 0 for a null handle.
///
/// # Safety
/// `b` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sqbox_box_dim(b: *const SqboxBox) -> usize {
    b.as_ref().map_or(0, |b| b.0.dim())
}

/// Writes the lower and upper corners into buffers of length `len`.
///
/// # Safety
/// `b` must be a live handle; `lo` and `hi` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sqbox_box_bounds(
    b: *const SqboxBox,
    lo: *mut f64,
    hi: *mut f64,
    len: usize,
) -> SqboxStatus {
    guard(|| {
        let b = &b.as_ref().ok_or_else(|| null("box"))?.0;
        if lo.is_null() || hi.is_null() {
            return Err(null("bounds buffer"));
        }
        if len < b.dim() {
            return Err(Failure(
                SqboxStatus::BufferTooSmall,
                format!("need {} values, got {len}", b.dim()),
            ));
        }
        ptr::copy_nonoverlapping(b.lo.as_ptr(), lo, b.dim());
        ptr::copy_nonoverlapping(b.hi.as_ptr(), hi, b.dim());
        Ok(())
    })
}

/// Conformal inflation factor and whether its confidence target was met.
///
/// # Safety
/// `b` must be a live handle; the out-pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sqbox_box_beta(
    b: *const SqboxBox,
    beta: *mut f64,
    guaranteed: *mut bool,
) -> SqboxStatus {
    guard(|| {
        let b = &b.as_ref().ok_or_else(|| null("box"))?.0;
        *out(beta, "beta")? = b.beta;
        *out(guaranteed, "guaranteed")? = b.guaranteed;
        Ok(())
    })
}

/// # Safety
/// `b` must be a live handle; `point` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sqbox_box_contains(
    b: *const SqboxBox,
    point: *const f64,
    len: usize,
    inside: *mut bool,
) -> SqboxStatus {
    guard(|| {
        let b = &b.as_ref().ok_or_else(|| null("box"))?.0;
        *out(inside, "inside")? = b.contains(slice(point, len, "point")?)?;
        Ok(())
    })
}

/// # Safety
/// `b` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sqbox_box_free(b: *mut SqboxBox) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// Defaults for `method`: `m` 100, `delta` 0.1, `delta_prime` 0.2, strict
/// quantile, 1000 trees with leaves of at least 20. The training count `l`
/// is 0 and must be set by the caller.
#[no_mangle]
pub extern "C" fn sqbox_fit_config_default(method: SqboxMethod) -> SqboxFitConfig {
    let forest = ForestParams::default();
    SqboxFitConfig {
        method,
        l: 0,
        m: 100,
        delta: 0.1,
        delta_prime: 0.2,
        strategy: SqboxStrategy::Strict,
        ucb_confidence: 0.9,
        trees: forest.tree_count,
        min_leaf: forest.min_leaf,
        seed: forest.seed,
    }
}

/// Fits a band model on `n` trajectories: `features` is `n x d` and
/// `behaviors` is `n x horizon`, both row-major.
///
/// # Safety
/// The arrays must have the stated sizes; `config` must be readable and
/// `handle` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sqbox_model_fit(
    features: *const f64,
    behaviors: *const f64,
    n: usize,
    d: usize,
    horizon: usize,
    config: *const SqboxFitConfig,
    handle: *mut *mut SqboxModel,
) -> SqboxStatus {
    guard(|| {
        let c = *config.as_ref().ok_or_else(|| null("config"))?;
        if d == 0 || horizon == 0 {
            return Err(Failure(
                SqboxStatus::InvalidInput,
                "d and horizon must be positive".into(),
            ));
        }
        let f = slice(features, product(n, d)?, "features")?;
        let feats: Vec<FeatureVector> = f.chunks(d).map(<[f64]>::to_vec).collect();
        let b = BehaviorMatrix::new(
            slice(behaviors, product(n, horizon)?, "behaviors")?.to_vec(),
            horizon,
        )?;
        let strat = strategy(c.strategy, c.ucb_confidence)?;
        let forest = ForestParams {
            tree_count: c.trees,
            min_leaf: c.min_leaf,
            seed: c.seed,
            ..ForestParams::default()
        };
        let (model, split) = match c.method {
            SqboxMethod::Sqbox => {
                let split = SplitConfig::sqbox(c.l, c.m, c.delta, c.delta_prime, strat);
                (
                    FittedModel::Sqbox(fit_sqbox(&feats, &b, split, forest)?),
                    split,
                )
            }
            SqboxMethod::Cte => {
                let split = SplitConfig::cte(c.l, c.delta, strat);
                (FittedModel::Cte(fit_cte(&feats, &b, split, forest)?), split)
            }
        };
        let provenance = serde_json::json!({ "source": "c-api", "records": n, "split": split });
        store(
            handle,
            SqboxModel(ModelBundle::new(model, forest, provenance)),
        )
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `handle` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sqbox_model_load(
    path: *const c_char,
    handle: *mut *mut SqboxModel,
) -> SqboxStatus {
    guard(|| {
        let bundle = ModelBundle::load(&path_arg(path)?)?;
        store(handle, SqboxModel(bundle))
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sqbox_model_save(
    model: *const SqboxModel,
    path: *const c_char,
) -> SqboxStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        m.0.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// Horizon of the model, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sqbox_model_horizon(model: *const SqboxModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.model.horizon())
}

/// Start-state dimension of the model, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sqbox_model_feature_dim(model: *const SqboxModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.model.feature_dim())
}

/// Band at start state `s0` into `lo` and `hi` (each `len >= horizon`).
/// `total_exceedance_bound`, when not null, receives the calibrated bound
/// of a total-exceedance model and NaN for a box model.
///
/// # Safety
/// `model` must be a live handle; `s0` must hold `d` doubles and the
/// buffers `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sqbox_model_predict_band(
    model: *const SqboxModel,
    s0: *const f64,
    d: usize,
    lo: *mut f64,
    hi: *mut f64,
    len: usize,
    total_exceedance_bound: *mut f64,
) -> SqboxStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0.model;
        if lo.is_null() || hi.is_null() {
            return Err(null("band buffer"));
        }
        let h = m.horizon();
        if len < h {
            return Err(Failure(
                SqboxStatus::BufferTooSmall,
                format!("need {h} values, got {len}"),
            ));
        }
        let p = m.predict(slice(s0, d, "s0")?)?;
        ptr::copy_nonoverlapping(p.band.lo.as_ptr(), lo, h);
        ptr::copy_nonoverlapping(p.band.hi.as_ptr(), hi, h);
        if let Some(o) = total_exceedance_bound.as_mut() {
            *o = p.total_exceedance_bound.unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sqbox_model_free(model: *mut SqboxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
