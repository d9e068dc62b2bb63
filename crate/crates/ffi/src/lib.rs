//! C ABI over the `psybench` core.
//!
//! Every fallible function returns a [`PsyStatus`] and writes results
//! through out-pointers. On failure the message is kept per thread and can
//! be read with [`psy_last_error`]. Handles ([`PsyDedup`], [`PsyMetrics`])
//! are opaque and must be released with their `_free` function. Strings
//! returned by the library are released with [`psy_string_free`].
//!
//! Panics never cross the boundary; they surface as `PSY_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use psybench::corpus::{DedupDecision, StreamingDedup};
use psybench::losses::{dpo_margin_from_ll, log_sigmoid, trait_penalty, SftConfig};
use psybench::metrics::{self, MetricAccumulator};
use psybench::prompting::{build_prompt, TemplateSet};
use psybench::scale::{parse_prediction, MappingKind};
use psybench::schema::{
    bundled_frames, bundled_is_profiles, grid_point, read_frames, read_is_profiles, validate_trait_vector,
    TaskFamily, TraitVector, GRID_LEN,
};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsyStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    /// No trait value could be read from the text.
    Unparsable = 4,
    /// A trait value or index was outside its allowed range.
    OutOfRange = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsyMappingKind {
    ProportionScaled = 0,
    PercentilePassthrough = 1,
    /// Logged as `unknown->percentile_clipped`.
    UnknownPercentileClipped = 2,
    Unparsable = 3,
}

/// Big Five values in percentile space, each in [0, 100].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsyTraits {
    pub o: f64,
    pub c: f64,
    pub e: f64,
    pub a: f64,
    pub n: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsyMetricReport {
    pub mae5: f64,
    pub rmse5: f64,
    pub profile_acc: f64,
    /// NaN when no scored sample had a defined cosine.
    pub cosine: f64,
    pub n_scored: usize,
    pub n_omitted: usize,
}

/// Streaming near-duplicate filter (character 5-gram Jaccard).
pub struct PsyDedup(StreamingDedup);

/// Streaming metric accumulator.
pub struct PsyMetrics(MetricAccumulator);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(PsyStatus, String);

type FfiResult<T> = Result<T, Failure>;

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> PsyStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PsyStatus::Ok,
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
            set_error(format!("panic: {msg}"));
            PsyStatus::Panic
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(PsyStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure(PsyStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(PsyStatus::InvalidUtf8, format!("{name}: {e}")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref()
        .ok_or_else(|| Failure(PsyStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut()
        .ok_or_else(|| Failure(PsyStatus::NullPointer, format!("{name} is null")))
}

fn to_vector(t: &PsyTraits) -> FfiResult<TraitVector> {
    validate_trait_vector([t.o, t.c, t.e, t.a, t.n]).map_err(|e| Failure(PsyStatus::OutOfRange, e.to_string()))
}

fn from_vector(v: &TraitVector) -> PsyTraits {
    let [o, c, e, a, n] = *v.as_array();
    PsyTraits { o, c, e, a, n }
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn psy_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Parses a model's trait report and maps it into percentile space.
/// `out_kind` may be NULL. On `PSY_STATUS_UNPARSABLE`, `*out_kind` (if given)
/// is set to `PSY_MAPPING_KIND_UNPARSABLE` and `*out` is untouched.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` and `out_kind` must be
/// valid for writes or NULL.
#[no_mangle]
pub unsafe extern "C" fn psy_parse_prediction(
    text: *const c_char,
    out: *mut PsyTraits,
    out_kind: *mut PsyMappingKind,
) -> PsyStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let out = out_arg(out, "out")?;
        match parse_prediction(text) {
            Ok((tv, diag)) => {
                *out = from_vector(&tv);
                if let Some(k) = out_kind.as_mut() {
                    *k = match diag.kind {
                        MappingKind::ProportionScaled => PsyMappingKind::ProportionScaled,
                        MappingKind::PercentilePassthrough => PsyMappingKind::PercentilePassthrough,
                        MappingKind::UnknownPercentileClipped => PsyMappingKind::UnknownPercentileClipped,
                        MappingKind::Unparsable => PsyMappingKind::Unparsable,
                    };
                }
                Ok(())
            }
            Err(e) => {
                if let Some(k) = out_kind.as_mut() {
                    *k = PsyMappingKind::Unparsable;
                }
                Err(Failure(PsyStatus::Unparsable, e.to_string()))
            }
        }
    })
}

unsafe fn pairwise(
    p: *const PsyTraits,
    t: *const PsyTraits,
    out: *mut f64,
    f: impl FnOnce(&TraitVector, &TraitVector) -> FfiResult<f64>,
) -> PsyStatus {
    guard(|| {
        let p = to_vector(ref_arg(p, "p")?)?;
        let t = to_vector(ref_arg(t, "t")?)?;
        *out_arg(out, "out")? = f(&p, &t)?;
        Ok(())
    })
}

/// Mean absolute error over the five traits.
///
/// # Safety
/// All pointers must be valid; `p` and `t` for reads, `out` for a write.
#[no_mangle]
pub unsafe extern "C" fn psy_mae5(p: *const PsyTraits, t: *const PsyTraits, out: *mut f64) -> PsyStatus {
    pairwise(p, t, out, |p, t| Ok(metrics::mae5(p, t)))
}

/// # Safety
/// As for [`psy_mae5`].
#[no_mangle]
pub unsafe extern "C" fn psy_rmse5(p: *const PsyTraits, t: *const PsyTraits, out: *mut f64) -> PsyStatus {
    pairwise(p, t, out, |p, t| Ok(metrics::rmse5(p, t)))
}

/// `100 - MAE5`.
///
/// # Safety
/// As for [`psy_mae5`].
#[no_mangle]
pub unsafe extern "C" fn psy_profile_acc(p: *const PsyTraits, t: *const PsyTraits, out: *mut f64) -> PsyStatus {
    pairwise(p, t, out, |p, t| Ok(metrics::profile_acc(p, t)))
}

/// Fails with `PSY_STATUS_INVALID_ARGUMENT` when either vector is all zeros.
///
/// # Safety
/// As for [`psy_mae5`].
#[no_mangle]
pub unsafe extern "C" fn psy_cosine(p: *const PsyTraits, t: *const PsyTraits, out: *mut f64) -> PsyStatus {
    pairwise(p, t, out, |p, t| metrics::cosine(p, t).map_err(|e| invalid(e.to_string())))
}

/// Number of points in the control grid.
#[no_mangle]
pub extern "C" fn psy_grid_len() -> usize {
    GRID_LEN
}

/// Writes grid point `index` to `out`. Points are in O, C, E, A, N
/// lexicographic order, so N changes fastest.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn psy_grid_get(index: usize, out: *mut PsyTraits) -> PsyStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let tv = grid_point(index)
            .ok_or_else(|| Failure(PsyStatus::OutOfRange, format!("grid index {index} >= {GRID_LEN}")))?;
        *out = from_vector(&tv);
        Ok(())
    })
}

/// Preference loss from the four length-normalized log-likelihoods.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn psy_dpo_loss(
    theta_chosen: f64,
    theta_rejected: f64,
    ref_chosen: f64,
    ref_rejected: f64,
    beta: f64,
    out: *mut f64,
) -> PsyStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if !(beta.is_finite() && beta > 0.0) {
            return Err(invalid(format!("beta must be positive, got {beta}")));
        }
        let lls = [theta_chosen, theta_rejected, ref_chosen, ref_rejected];
        if lls.iter().any(|x| !x.is_finite()) {
            return Err(invalid("log-likelihoods must be finite"));
        }
        *out = -log_sigmoid(dpo_margin_from_ll(theta_chosen, theta_rejected, ref_chosen, ref_rejected, beta));
        Ok(())
    })
}

/// Supervised loss: `-ll` plus the weighted trait penalty. `weights` points
/// to five floats in O, C, E, A, N order, or is NULL for equal weights.
///
/// # Safety
/// `scored` and `target` must be valid for reads, `weights` NULL or valid
/// for five reads, `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn psy_sft_loss(
    length_norm_ll: f64,
    scored: *const PsyTraits,
    target: *const PsyTraits,
    eta: f64,
    weights: *const f64,
    out: *mut f64,
) -> PsyStatus {
    guard(|| {
        let scored = to_vector(ref_arg(scored, "scored")?)?;
        let target = to_vector(ref_arg(target, "target")?)?;
        let out = out_arg(out, "out")?;
        let mut cfg = SftConfig { eta, ..SftConfig::default() };
        if !weights.is_null() {
            cfg.weights.copy_from_slice(std::slice::from_raw_parts(weights, 5));
        }
        cfg.validate().map_err(|e| invalid(e.to_string()))?;
        if !length_norm_ll.is_finite() || length_norm_ll > 0.0 {
            return Err(invalid(format!("log-likelihood must be finite and <= 0, got {length_norm_ll}")));
        }
        *out = -length_norm_ll + trait_penalty(&scored, &target, &cfg);
        Ok(())
    })
}

/// Creates a dedup filter that drops texts whose similarity to an earlier
/// kept text is strictly greater than `threshold`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn psy_dedup_new(threshold: f64, out: *mut *mut PsyDedup) -> PsyStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if !threshold.is_finite() {
            return Err(invalid("threshold must be finite"));
        }
        *out = Box::into_raw(Box::new(PsyDedup(StreamingDedup::new(threshold))));
        Ok(())
    })
}

/// Offers one text. On keep, `*out_kept` is true and `*out_index` is the
/// text's index among kept texts. On removal, `*out_kept` is false,
/// `*out_index` is the matched kept text and `*out_similarity` its Jaccard.
///
/// # Safety
/// `handle` must come from [`psy_dedup_new`]; `text` must be NUL-terminated;
/// out-pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn psy_dedup_offer(
    handle: *mut PsyDedup,
    text: *const c_char,
    out_kept: *mut bool,
    out_index: *mut usize,
    out_similarity: *mut f64,
) -> PsyStatus {
    guard(|| {
        let h = out_arg(handle, "handle")?;
        let text = str_arg(text, "text")?;
        let kept = out_arg(out_kept, "out_kept")?;
        let index = out_arg(out_index, "out_index")?;
        let sim = out_arg(out_similarity, "out_similarity")?;
        match h.0.offer(text) {
            DedupDecision::Keep(i) => {
                *kept = true;
                *index = i;
                *sim = 0.0;
            }
            DedupDecision::Remove { matched, similarity } => {
                *kept = false;
                *index = matched;
                *sim = similarity;
            }
        }
        Ok(())
    })
}

/// Number of texts kept so far; 0 for a NULL handle.
///
/// # Safety
/// `handle` must be NULL or come from [`psy_dedup_new`].
#[no_mangle]
pub unsafe extern "C" fn psy_dedup_kept(handle: *const PsyDedup) -> usize {
    handle.as_ref().map_or(0, |h| h.0.kept())
}

/// # Safety
/// `handle` must be NULL or come from [`psy_dedup_new`], and not be used again.
#[no_mangle]
pub unsafe extern "C" fn psy_dedup_free(handle: *mut PsyDedup) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

#[no_mangle]
pub extern "C" fn psy_metrics_new() -> *mut PsyMetrics {
    Box::into_raw(Box::new(PsyMetrics(MetricAccumulator::new())))
}

/// Adds one sample. A NULL `prediction` counts as an omitted (unparsable)
/// output.
///
/// # Safety
/// `handle` must come from [`psy_metrics_new`]; `prediction` NULL or valid;
/// `target` valid.
#[no_mangle]
pub unsafe extern "C" fn psy_metrics_push(
    handle: *mut PsyMetrics,
    prediction: *const PsyTraits,
    target: *const PsyTraits,
) -> PsyStatus {
    guard(|| {
        let h = out_arg(handle, "handle")?;
        let t = to_vector(ref_arg(target, "target")?)?;
        let p = prediction.as_ref().map(to_vector).transpose()?;
        h.0.push(p.as_ref(), &t);
        Ok(())
    })
}

/// Fails with `PSY_STATUS_INVALID_ARGUMENT` if nothing was scored.
///
/// # Safety
/// `handle` must come from [`psy_metrics_new`]; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn psy_metrics_finish(handle: *const PsyMetrics, out: *mut PsyMetricReport) -> PsyStatus {
    guard(|| {
        let h = ref_arg(handle, "handle")?;
        let out = out_arg(out, "out")?;
        let r = h.0.finish().map_err(|e| invalid(e.to_string()))?;
        *out = PsyMetricReport {
            mae5: r.mae5,
            rmse5: r.rmse5,
            profile_acc: r.profile_acc,
            cosine: r.cosine.unwrap_or(f64::NAN),
            n_scored: r.n_scored,
            n_omitted: r.n_omitted,
        };
        Ok(())
    })
}

/// # Safety
/// `handle` must be NULL or come from [`psy_metrics_new`], and not be used again.
#[no_mangle]
pub unsafe extern "C" fn psy_metrics_free(handle: *mut PsyMetrics) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptRequest {
    /// Index into the bundled IS profiles, used when `is_profile` is absent.
    #[serde(default)]
    is_index: usize,
    /// One IS profile record, as in the profiles JSONL.
    is_profile: Option<serde_json::Value>,
    #[serde(default)]
    frame_index: usize,
    /// One frame record, as in the frames JSONL.
    frame: Option<serde_json::Value>,
    target: [f64; 5],
    family: String,
}

/// Builds a persona prompt from a JSON request:
/// `{"target":[o,c,e,a,n],"family":"role_play","is_index":0,"frame_index":0}`.
/// `is_profile` and `frame` may replace the indices with inline records.
/// The prompt text is written to `*out` and must be released with
/// [`psy_string_free`].
///
/// # Safety
/// `request_json` must be NUL-terminated; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn psy_build_prompt_json(request_json: *const c_char, out: *mut *mut c_char) -> PsyStatus {
    guard(|| {
        let req: PromptRequest =
            serde_json::from_str(str_arg(request_json, "request_json")?).map_err(|e| invalid(e.to_string()))?;
        let out = out_arg(out, "out")?;
        let is = match req.is_profile {
            Some(v) => read_is_profiles(std::io::Cursor::new(v.to_string()))
                .map_err(|e| invalid(e.to_string()))?
                .pop()
                .ok_or_else(|| invalid("empty is_profile"))?,
            None => bundled_is_profiles()
                .into_iter()
                .nth(req.is_index)
                .ok_or_else(|| Failure(PsyStatus::OutOfRange, format!("is_index {}", req.is_index)))?,
        };
        let frame = match req.frame {
            Some(v) => read_frames(std::io::Cursor::new(v.to_string()))
                .map_err(|e| invalid(e.to_string()))?
                .pop()
                .ok_or_else(|| invalid("empty frame"))?,
            None => bundled_frames()
                .into_iter()
                .nth(req.frame_index)
                .ok_or_else(|| Failure(PsyStatus::OutOfRange, format!("frame_index {}", req.frame_index)))?,
        };
        let target = validate_trait_vector(req.target).map_err(|e| Failure(PsyStatus::OutOfRange, e.to_string()))?;
        let family =
            TaskFamily::parse(&req.family).ok_or_else(|| invalid(format!("unknown family {:?}", req.family)))?;
        let prompt =
            build_prompt(&TemplateSet::bundled(), &is, &frame, &target, family).map_err(|e| invalid(e.to_string()))?;
        *out = CString::new(prompt.full_text).map_err(|e| invalid(e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not freed before.
#[no_mangle]
pub unsafe extern "C" fn psy_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
