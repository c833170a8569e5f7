//! C ABI over the faircap core.
//!
//! Every function returns a [`FaircapStatus`]. On failure the message is kept
//! per thread and can be read with [`faircap_last_error`]. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `_free` function. Strings returned to the caller are released with
//! [`faircap_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use faircap::caselib::Repository;
use faircap::cohort::{ingest_csv, synth_cohort, write_cohort_csv, BiasInjection, PatientRecord};
use faircap::metrics::{auprc, auroc, brier, scored, ConfusionCounts};
use faircap::prompting::{parse_response, StrategyKind};
use faircap::retrieval::{retrieve, RetrievalConfig};
use faircap::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaircapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Data = 4,
    Transport = 5,
    FailureCap = 6,
    OutOfRange = 7,
    Panic = 99,
}

impl From<&Error> for FaircapStatus {
    fn from(e: &Error) -> Self {
        match e.exit_code() {
            1 => FaircapStatus::Config,
            3 => FaircapStatus::Transport,
            4 => FaircapStatus::FailureCap,
            _ => FaircapStatus::Data,
        }
    }
}

/// Opaque cohort handle.
pub struct FaircapCohort {
    records: Vec<PatientRecord>,
}

/// Opaque case repository handle.
pub struct FaircapRepository {
    repo: Repository,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: FaircapStatus, msg: impl Into<String>) -> FaircapStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> FaircapStatus {
    let status = FaircapStatus::from(&e);
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into [`FaircapStatus::Panic`].
fn guard(f: impl FnOnce() -> FaircapStatus) -> FaircapStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(FaircapStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, FaircapStatus> {
    if p.is_null() {
        return Err(fail(FaircapStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FaircapStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

fn out_string(s: String, out: *mut *mut c_char) -> FaircapStatus {
    match CString::new(s) {
        Ok(c) => {
            // SAFETY: callers check `out` for null before calling.
            unsafe { *out = c.into_raw() };
            FaircapStatus::Ok
        }
        Err(_) => fail(FaircapStatus::Data, "string contains an interior NUL"),
    }
}

unsafe fn scored_args(
    scores: *const f64,
    labels: *const u8,
    n: usize,
) -> Result<Vec<faircap::metrics::ScoredLabel>, FaircapStatus> {
    if scores.is_null() || labels.is_null() {
        return Err(fail(FaircapStatus::NullPointer, "`scores` or `labels` is null"));
    }
    let s = std::slice::from_raw_parts(scores, n);
    let l: Vec<bool> = std::slice::from_raw_parts(labels, n).iter().map(|&b| b != 0).collect();
    Ok(scored(s, &l))
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next faircap call on the same thread.
#[no_mangle]
pub extern "C" fn faircap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must come from a faircap function and must not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn faircap_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a synthetic cohort. `bias` may be null or a list such as
/// `male=0.5,black=0.3`.
///
/// # Safety
/// `bias` must be null or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn faircap_cohort_synth(
    n: usize,
    seed: u64,
    bias: *const c_char,
    out: *mut *mut FaircapCohort,
) -> FaircapStatus {
    guard(|| {
        if out.is_null() {
            return fail(FaircapStatus::NullPointer, "`out` is null");
        }
        let injection: Option<BiasInjection> = if bias.is_null() {
            None
        } else {
            let text = match str_arg(bias, "bias") {
                Ok(t) => t,
                Err(s) => return s,
            };
            match text.parse() {
                Ok(b) => Some(b),
                Err(e) => return from_error(e),
            }
        };
        match synth_cohort(n, seed, injection.as_ref()) {
            Ok(records) => {
                *out = Box::into_raw(Box::new(FaircapCohort { records }));
                FaircapStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Loads and validates a cohort CSV; invalid rows are dropped.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn faircap_cohort_load_csv(path: *const c_char, out: *mut *mut FaircapCohort) -> FaircapStatus {
    guard(|| {
        if out.is_null() {
            return fail(FaircapStatus::NullPointer, "`out` is null");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match ingest_csv(Path::new(path), false) {
            Ok(report) => {
                *out = Box::into_raw(Box::new(FaircapCohort {
                    records: report.records,
                }));
                FaircapStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `cohort` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn faircap_cohort_len(cohort: *const FaircapCohort) -> usize {
    cohort.as_ref().map_or(0, |c| c.records.len())
}

/// Writes the cohort as CSV text into `*out`.
///
/// # Safety
/// `cohort` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn faircap_cohort_to_csv(cohort: *const FaircapCohort, out: *mut *mut c_char) -> FaircapStatus {
    guard(|| match (cohort.as_ref(), out.is_null()) {
        (Some(c), false) => out_string(write_cohort_csv(&c.records), out),
        _ => fail(FaircapStatus::NullPointer, "`cohort` or `out` is null"),
    })
}

/// # Safety
/// `cohort` must come from a faircap constructor and must not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn faircap_cohort_free(cohort: *mut FaircapCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

/// # Safety
/// `scores` and `labels` must each hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn faircap_auroc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> FaircapStatus {
    metric(scores, labels, n, out, auroc)
}

/// # Safety
/// As for [`faircap_auroc`].
#[no_mangle]
pub unsafe extern "C" fn faircap_auprc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> FaircapStatus {
    metric(scores, labels, n, out, auprc)
}

/// # Safety
/// As for [`faircap_auroc`].
#[no_mangle]
pub unsafe extern "C" fn faircap_brier(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> FaircapStatus {
    metric(scores, labels, n, out, brier)
}

unsafe fn metric(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
    f: fn(&[faircap::metrics::ScoredLabel]) -> faircap::Result<f64>,
) -> FaircapStatus {
    guard(|| {
        if out.is_null() {
            return fail(FaircapStatus::NullPointer, "`out` is null");
        }
        let data = match scored_args(scores, labels, n) {
            Ok(d) => d,
            Err(s) => return s,
        };
        match f(&data) {
            Ok(v) => {
                *out = v;
                FaircapStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Equal opportunity difference between the rows with `group[i] != 0` and
/// the rest, at `threshold`.
///
/// # Safety
/// `scores`, `labels` and `group` must each hold `n` elements; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn faircap_eod(
    scores: *const f64,
    labels: *const u8,
    group: *const u8,
    n: usize,
    threshold: f64,
    out: *mut f64,
) -> FaircapStatus {
    guard(|| {
        if out.is_null() || group.is_null() {
            return fail(FaircapStatus::NullPointer, "`group` or `out` is null");
        }
        let data = match scored_args(scores, labels, n) {
            Ok(d) => d,
            Err(s) => return s,
        };
        let g = std::slice::from_raw_parts(group, n);
        let (a, b): (Vec<_>, Vec<_>) = data.iter().zip(g).partition(|(_, &m)| m != 0);
        let tpr = |rows: Vec<(&faircap::metrics::ScoredLabel, &u8)>| {
            let d: Vec<_> = rows.into_iter().map(|(s, _)| *s).collect();
            ConfusionCounts::from_scores(&d, threshold).tpr()
        };
        match (tpr(a), tpr(b)) {
            (Some(x), Some(y)) => {
                *out = (x - y).abs();
                FaircapStatus::Ok
            }
            _ => fail(FaircapStatus::Data, "a group has no positive labels"),
        }
    })
}

/// Loads a case repository file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn faircap_repository_load(
    path: *const c_char,
    out: *mut *mut FaircapRepository,
) -> FaircapStatus {
    guard(|| {
        if out.is_null() {
            return fail(FaircapStatus::NullPointer, "`out` is null");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Repository::load(Path::new(path)) {
            Ok(repo) => {
                *out = Box::into_raw(Box::new(FaircapRepository { repo }));
                FaircapStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `repo` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn faircap_repository_len(repo: *const FaircapRepository) -> usize {
    repo.as_ref().map_or(0, |r| r.repo.cases.len())
}

/// # Safety
/// `repo` must come from [`faircap_repository_load`] and must not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn faircap_repository_free(repo: *mut FaircapRepository) {
    if !repo.is_null() {
        drop(Box::from_raw(repo));
    }
}

/// Retrieves the analog case for patient `index` of `cohort` with the default
/// retrieval settings. When no case qualifies, `*case_id` is set to null and
/// the status is still `Ok`.
///
/// # Safety
/// Handles must be live; `case_id` and `similarity` must be writable.
#[no_mangle]
pub unsafe extern "C" fn faircap_retrieve(
    repo: *const FaircapRepository,
    cohort: *const FaircapCohort,
    index: usize,
    case_id: *mut *mut c_char,
    similarity: *mut f64,
) -> FaircapStatus {
    guard(|| {
        let (Some(r), Some(c)) = (repo.as_ref(), cohort.as_ref()) else {
            return fail(FaircapStatus::NullPointer, "`repo` or `cohort` is null");
        };
        if case_id.is_null() || similarity.is_null() {
            return fail(FaircapStatus::NullPointer, "output pointer is null");
        }
        let Some(patient) = c.records.get(index) else {
            return fail(FaircapStatus::OutOfRange, format!("index {index} out of range"));
        };
        match retrieve(patient, &r.repo, &RetrievalConfig::default()) {
            Ok(Some(hit)) => {
                *similarity = hit.similarity;
                out_string(hit.case.id.clone(), case_id)
            }
            Ok(None) => {
                *case_id = ptr::null_mut();
                *similarity = f64::NAN;
                FaircapStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Parses a raw model response into a prediction record serialized as JSON.
///
/// # Safety
/// `raw` and `strategy` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn faircap_parse_response(
    raw: *const c_char,
    strategy: *const c_char,
    out: *mut *mut c_char,
) -> FaircapStatus {
    guard(|| {
        if out.is_null() {
            return fail(FaircapStatus::NullPointer, "`out` is null");
        }
        let (raw, strategy) = match (str_arg(raw, "raw"), str_arg(strategy, "strategy")) {
            (Ok(r), Ok(s)) => (r, s),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let kind: StrategyKind = match strategy.parse() {
            Ok(k) => k,
            Err(e) => return from_error(e),
        };
        match parse_response(raw, kind) {
            Ok(rec) => match serde_json::to_string(&rec) {
                Ok(json) => out_string(json, out),
                Err(e) => fail(FaircapStatus::Data, e.to_string()),
            },
            Err(e) => from_error(e),
        }
    })
}
