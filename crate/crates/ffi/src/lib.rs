//! C ABI over the estimator.
//!
//! Every fallible function returns an [`AttrsetsStatus`] and writes its result through an out
//! pointer. On failure the message is kept per thread and read with [`attrsets_last_error`].
//! Priors and estimators are opaque handles released with their `_free` functions.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use attrsets_core::estimator::{Estimator, EstimatorConfig, Moments};
use attrsets_core::loss::{clipped_log_loss, square_loss, LossDecomposition};
use attrsets_core::math::{binomial_tail, BetaCoefficients, BinomialTailParams, CoefficientTable, Prior};
use attrsets_core::sim::AttributionSet;
use attrsets_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttrsetsStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    Degenerate = 3,
    Config = 4,
    Dimension = 5,
    Panic = 6,
    Internal = 7,
}

pub const ATTRSETS_LOSS_SQUARE: u32 = 0;
pub const ATTRSETS_LOSS_LOGLOSS: u32 = 1;

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AttrsetsBeta {
    pub beta1: f64,
    pub beta0: f64,
    /// P(Bin(n, p) >= j + k).
    pub tail: f64,
}

/// Opaque prior handle.
pub struct AttrsetsPrior(Prior);

/// Opaque estimator handle.
pub struct AttrsetsEstimator {
    inner: Estimator,
    loss: LossDecomposition,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AttrsetsStatus {
    match e {
        Error::Domain(_) => AttrsetsStatus::Domain,
        Error::Degenerate(_) => AttrsetsStatus::Degenerate,
        Error::Config(_) | Error::TooLarge { .. } => AttrsetsStatus::Config,
        Error::Dimension { .. } => AttrsetsStatus::Dimension,
        _ => AttrsetsStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), AttrsetsStatus>) -> AttrsetsStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AttrsetsStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("internal panic".into());
            AttrsetsStatus::Panic
        }
    }
}

fn fail(e: Error) -> AttrsetsStatus {
    let status = status_of(&e);
    set_error(e.to_string());
    status
}

fn null(what: &str) -> AttrsetsStatus {
    set_error(format!("{what} is null"));
    AttrsetsStatus::NullPointer
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, AttrsetsStatus> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn input_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], AttrsetsStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated, truncated to
/// `len`). Returns the full message length plus one, or 0 when there is no error.
#[no_mangle]
pub unsafe extern "C" fn attrsets_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let slot = slot.borrow();
        let Some(msg) = slot.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// P(Bin(n, p) >= threshold).
#[no_mangle]
pub unsafe extern "C" fn attrsets_binomial_tail(n: u64, p: f64, threshold: u64, out: *mut f64) -> AttrsetsStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = binomial_tail(BinomialTailParams { n, p, threshold }).map_err(fail)?;
        Ok(())
    })
}

/// Coefficients for conversion ordinal `j` (1-based), window size `k` and prior weight `pi_i`.
#[no_mangle]
pub unsafe extern "C" fn attrsets_beta_coefficients(
    n: u64,
    p: f64,
    j: usize,
    k: usize,
    pi_i: f64,
    out: *mut AttrsetsBeta,
) -> AttrsetsStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let table = CoefficientTable::new(n, p, Default::default()).map_err(fail)?;
        let BetaCoefficients { beta1, beta0, tail } = table.beta(j, k, pi_i).map_err(fail)?;
        *out = AttrsetsBeta { beta1, beta0, tail };
        Ok(())
    })
}

fn boxed_prior(prior: Result<Prior, Error>, out: &mut *mut AttrsetsPrior) -> Result<(), AttrsetsStatus> {
    *out = Box::into_raw(Box::new(AttrsetsPrior(prior.map_err(fail)?)));
    Ok(())
}

/// Prior from `k` non-negative weights summing to one.
#[no_mangle]
pub unsafe extern "C" fn attrsets_prior_new(weights: *const f64, k: usize, out: *mut *mut AttrsetsPrior) -> AttrsetsStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let w = input_slice(weights, k, "weights")?;
        boxed_prior(Prior::new(w.to_vec()), out)
    })
}

#[no_mangle]
pub unsafe extern "C" fn attrsets_prior_uniform(k: usize, out: *mut *mut AttrsetsPrior) -> AttrsetsStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        if k == 0 {
            return Err(fail(Error::Domain("k must be positive".into())));
        }
        boxed_prior(Ok(Prior::uniform(k)), out)
    })
}

/// Weights proportional to 2^-(k - r) for position r.
#[no_mangle]
pub unsafe extern "C" fn attrsets_prior_exponential(k: usize, out: *mut *mut AttrsetsPrior) -> AttrsetsStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        if k == 0 {
            return Err(fail(Error::Domain("k must be positive".into())));
        }
        boxed_prior(Ok(Prior::exponential(k)), out)
    })
}

#[no_mangle]
pub unsafe extern "C" fn attrsets_prior_k(prior: *const AttrsetsPrior, out: *mut usize) -> AttrsetsStatus {
    guard(|| {
        let prior = prior.as_ref().ok_or_else(|| null("prior"))?;
        *out_ref(out, "out")? = prior.0.k();
        Ok(())
    })
}

/// Sum of squared weights.
#[no_mangle]
pub unsafe extern "C" fn attrsets_prior_sigma(prior: *const AttrsetsPrior, out: *mut f64) -> AttrsetsStatus {
    guard(|| {
        let prior = prior.as_ref().ok_or_else(|| null("prior"))?;
        *out_ref(out, "out")? = prior.0.sigma();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn attrsets_prior_free(prior: *mut AttrsetsPrior) {
    if !prior.is_null() {
        drop(Box::from_raw(prior));
    }
}

/// Estimator for a stream of length `n` with rate `p`. `loss` is one of the
/// `ATTRSETS_LOSS_*` constants; `clip` is read only for log loss. `j_max = 0` keeps the
/// default ordinal cap.
#[no_mangle]
pub unsafe extern "C" fn attrsets_estimator_new(
    n: usize,
    p: f64,
    prior: *const AttrsetsPrior,
    loss: u32,
    clip: f64,
    j_max: usize,
    out: *mut *mut AttrsetsEstimator,
) -> AttrsetsStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let prior = prior.as_ref().ok_or_else(|| null("prior"))?;
        let loss = match loss {
            ATTRSETS_LOSS_SQUARE => square_loss(),
            ATTRSETS_LOSS_LOGLOSS => clipped_log_loss(clip).map_err(fail)?,
            other => return Err(fail(Error::Config(format!("unknown loss code {other}")))),
        };
        let mut config = EstimatorConfig::new(n, p, prior.0.clone()).map_err(fail)?;
        if j_max != 0 {
            config = config.with_j_max(j_max).map_err(fail)?;
        }
        let inner = Estimator::new(config, loss).map_err(fail)?;
        *out = Box::into_raw(Box::new(AttrsetsEstimator { inner, loss }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn attrsets_estimator_free(estimator: *mut AttrsetsEstimator) {
    if !estimator.is_null() {
        drop(Box::from_raw(estimator));
    }
}

/// Means of f1 and f2 over `len` predictions.
#[no_mangle]
pub unsafe extern "C" fn attrsets_estimator_moments(
    estimator: *const AttrsetsEstimator,
    predictions: *const f64,
    len: usize,
    e_f1: *mut f64,
    e_f2: *mut f64,
) -> AttrsetsStatus {
    guard(|| {
        let est = estimator.as_ref().ok_or_else(|| null("estimator"))?;
        let preds = input_slice(predictions, len, "predictions")?;
        let m = Moments::from_predictions(preds, &est.loss);
        *out_ref(e_f1, "e_f1")? = m.e_f1;
        *out_ref(e_f2, "e_f2")? = m.e_f2;
        Ok(())
    })
}

/// Aggregate estimate over `m` sets given as an `m * k` row-major array of stream indices,
/// ordered by conversion, with predictions `h` for all `n` stream points.
#[no_mangle]
pub unsafe extern "C" fn attrsets_estimator_aggregate(
    estimator: *const AttrsetsEstimator,
    set_indices: *const usize,
    m: usize,
    h: *const f64,
    n: usize,
    e_f1: f64,
    e_f2: f64,
    out: *mut f64,
) -> AttrsetsStatus {
    guard(|| {
        let est = estimator.as_ref().ok_or_else(|| null("estimator"))?;
        let out = out_ref(out, "out")?;
        let config = est.inner.config();
        let k = config.k;
        if n != config.n {
            return Err(fail(Error::Dimension { expected: config.n, got: n }));
        }
        let len = m.checked_mul(k).ok_or_else(|| fail(Error::Config("set array too large".into())))?;
        let flat = input_slice(set_indices, len, "set_indices")?;
        let h = input_slice(h, n, "h")?;
        if let Some(&bad) = flat.iter().find(|&&i| i >= n) {
            return Err(fail(Error::Domain(format!("stream index {bad} outside [0, {n})"))));
        }
        let sets: Vec<AttributionSet> = flat
            .chunks(k)
            .enumerate()
            .map(|(row, idx)| AttributionSet {
                j: row + 1,
                start: idx[0] as i64,
                indices: idx.to_vec(),
            })
            .collect();
        *out = est
            .inner
            .aggregate_estimate(&sets, h, Moments { e_f1, e_f2 })
            .map_err(fail)?
            .value;
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn attrsets_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
