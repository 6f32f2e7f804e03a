//! C interface to benchlab.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `_free` function. Every fallible call returns a
//! [`BenchlabStatus`]; on failure `benchlab_last_error` describes the most
//! recent error on the calling thread.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use benchlab::correspondence::{merge_labelers, tolerance_pixels};
use benchlab::io_formats::{master_from_json, master_to_json, to_json_bytes, LabelsFile, StrengthsFile};
use benchlab::label_model::{extract_orphans, MasterMap};
use benchlab::risk_eval::true_strength_risk;
use benchlab::strength_inference::{
    run_em, EmConfig, EmResult, MuMode, DEFAULT_EPSILON, DEFAULT_GRID, DEFAULT_MAX_ITERS, DEFAULT_SIGMA, DEFAULT_TOL,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    InferenceFailed = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Merged master map of one image.
pub struct BenchlabMaster(MasterMap);

/// Strengths and labeler profiles inferred for one master map.
pub struct BenchlabEmResult {
    image_id: String,
    em: EmResult,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BenchlabEmConfig {
    pub sigma: f64,
    pub grid: usize,
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// True uses the kernel-regression profile instead of the sigmoid fit.
    pub raw_mu: bool,
}

impl From<BenchlabEmConfig> for EmConfig {
    fn from(c: BenchlabEmConfig) -> Self {
        Self {
            sigma: c.sigma,
            grid: c.grid,
            epsilon: c.epsilon,
            max_iters: c.max_iters,
            tol: c.tol,
            mu_mode: if c.raw_mu { MuMode::Raw } else { MuMode::Sigmoid },
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl std::fmt::Display) {
    let text = message.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(text).expect("nul bytes removed")));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: BenchlabStatus, message: impl std::fmt::Display) -> BenchlabStatus {
    set_error(message);
    status
}

fn guard(f: impl FnOnce() -> BenchlabStatus) -> BenchlabStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(BenchlabStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, BenchlabStatus> {
    if p.is_null() {
        return Err(fail(BenchlabStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(BenchlabStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn into_c_string(bytes: Vec<u8>) -> *mut c_char {
    CString::new(bytes).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn benchlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn benchlab_em_config_default() -> BenchlabEmConfig {
    BenchlabEmConfig {
        sigma: DEFAULT_SIGMA,
        grid: DEFAULT_GRID,
        epsilon: DEFAULT_EPSILON,
        max_iters: DEFAULT_MAX_ITERS,
        tol: DEFAULT_TOL,
        raw_mu: false,
    }
}

/// Parses a master-map JSON document.
#[no_mangle]
pub unsafe extern "C" fn benchlab_master_from_json(json: *const c_char, out: *mut *mut BenchlabMaster) -> BenchlabStatus {
    guard(|| {
        if out.is_null() {
            return fail(BenchlabStatus::NullPointer, "out is null");
        }
        let text = match str_arg(json, "json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match master_from_json(text.as_bytes()) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(BenchlabMaster(m)));
                BenchlabStatus::Ok
            }
            Err(e) => fail(BenchlabStatus::InvalidInput, e),
        }
    })
}

/// Merges a labels JSON document; `tolerance` is a fraction of the image diagonal.
#[no_mangle]
pub unsafe extern "C" fn benchlab_merge_labels(
    labels_json: *const c_char,
    tolerance: f64,
    out: *mut *mut BenchlabMaster,
) -> BenchlabStatus {
    guard(|| {
        if out.is_null() {
            return fail(BenchlabStatus::NullPointer, "out is null");
        }
        let text = match str_arg(labels_json, "labels_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let result = LabelsFile::parse(text.as_bytes())
            .map_err(|e| e.to_string())
            .and_then(|f| {
                let maps = f.labeler_maps().map_err(|e| e.to_string())?;
                let d_max = tolerance_pixels(tolerance, f.width, f.height);
                merge_labelers(&maps, d_max).map_err(|e| e.to_string())
            });
        match result {
            Ok(m) => {
                *out = Box::into_raw(Box::new(BenchlabMaster(m)));
                BenchlabStatus::Ok
            }
            Err(e) => fail(BenchlabStatus::InvalidInput, e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn benchlab_master_pixel_count(master: *const BenchlabMaster, out: *mut usize) -> BenchlabStatus {
    guard(|| match (master.as_ref(), out.is_null()) {
        (Some(m), false) => {
            *out = m.0.len();
            BenchlabStatus::Ok
        }
        _ => fail(BenchlabStatus::NullPointer, "master or out is null"),
    })
}

/// Number of master pixels marked by exactly one labeler.
#[no_mangle]
pub unsafe extern "C" fn benchlab_master_orphan_count(master: *const BenchlabMaster, out: *mut usize) -> BenchlabStatus {
    guard(|| match (master.as_ref(), out.is_null()) {
        (Some(m), false) => {
            *out = extract_orphans(&m.0).len();
            BenchlabStatus::Ok
        }
        _ => fail(BenchlabStatus::NullPointer, "master or out is null"),
    })
}

/// Master map as JSON; release with `benchlab_string_free`.
#[no_mangle]
pub unsafe extern "C" fn benchlab_master_to_json(master: *const BenchlabMaster, out: *mut *mut c_char) -> BenchlabStatus {
    guard(|| match (master.as_ref(), out.is_null()) {
        (Some(m), false) => {
            *out = into_c_string(master_to_json(&m.0));
            BenchlabStatus::Ok
        }
        _ => fail(BenchlabStatus::NullPointer, "master or out is null"),
    })
}

#[no_mangle]
pub unsafe extern "C" fn benchlab_master_free(master: *mut BenchlabMaster) {
    if !master.is_null() {
        drop(Box::from_raw(master));
    }
}

/// Runs EM; a NULL `config` uses the defaults.
#[no_mangle]
pub unsafe extern "C" fn benchlab_run_em(
    master: *const BenchlabMaster,
    config: *const BenchlabEmConfig,
    out: *mut *mut BenchlabEmResult,
) -> BenchlabStatus {
    guard(|| {
        let Some(m) = master.as_ref() else {
            return fail(BenchlabStatus::NullPointer, "master is null");
        };
        if out.is_null() {
            return fail(BenchlabStatus::NullPointer, "out is null");
        }
        let cfg: EmConfig = config.as_ref().copied().unwrap_or_else(|| benchlab_em_config_default()).into();
        match run_em(&m.0, &cfg) {
            Ok(em) => {
                *out = Box::into_raw(Box::new(BenchlabEmResult { image_id: m.0.image_id.clone(), em }));
                BenchlabStatus::Ok
            }
            Err(e) => fail(BenchlabStatus::InferenceFailed, e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn benchlab_em_result_iterations(result: *const BenchlabEmResult, out: *mut usize) -> BenchlabStatus {
    guard(|| match (result.as_ref(), out.is_null()) {
        (Some(r), false) => {
            *out = r.em.iterations_run;
            BenchlabStatus::Ok
        }
        _ => fail(BenchlabStatus::NullPointer, "result or out is null"),
    })
}

/// Copies pixel ids and strengths in id order. `written` always receives the
/// full count; when it exceeds `capacity` nothing is copied and
/// `BUFFER_TOO_SMALL` is returned.
#[no_mangle]
pub unsafe extern "C" fn benchlab_em_result_strengths(
    result: *const BenchlabEmResult,
    ids: *mut u32,
    strengths: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> BenchlabStatus {
    guard(|| {
        let Some(r) = result.as_ref() else {
            return fail(BenchlabStatus::NullPointer, "result is null");
        };
        if written.is_null() {
            return fail(BenchlabStatus::NullPointer, "written is null");
        }
        let n = r.em.strengths.len();
        *written = n;
        if n > capacity {
            return fail(BenchlabStatus::BufferTooSmall, format!("{n} strengths, capacity {capacity}"));
        }
        if n > 0 && (ids.is_null() || strengths.is_null()) {
            return fail(BenchlabStatus::NullPointer, "ids or strengths is null");
        }
        for (i, (id, x)) in r.em.strengths.iter().enumerate() {
            *ids.add(i) = id;
            *strengths.add(i) = x;
        }
        BenchlabStatus::Ok
    })
}

/// Strengths file JSON; release with `benchlab_string_free`.
#[no_mangle]
pub unsafe extern "C" fn benchlab_em_result_to_json(result: *const BenchlabEmResult, out: *mut *mut c_char) -> BenchlabStatus {
    guard(|| match (result.as_ref(), out.is_null()) {
        (Some(r), false) => {
            *out = into_c_string(to_json_bytes(&StrengthsFile::from_em(&r.image_id, &r.em)));
            BenchlabStatus::Ok
        }
        _ => fail(BenchlabStatus::NullPointer, "result or out is null"),
    })
}

#[no_mangle]
pub unsafe extern "C" fn benchlab_em_result_free(result: *mut BenchlabEmResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

#[no_mangle]
pub unsafe extern "C" fn benchlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Fraction of (s, a) pairs with a stronger than s, ties counting half.
#[no_mangle]
pub unsafe extern "C" fn benchlab_true_strength_risk(
    s: *const f64,
    s_len: usize,
    a: *const f64,
    a_len: usize,
    out: *mut f64,
) -> BenchlabStatus {
    guard(|| {
        if out.is_null() || (s_len > 0 && s.is_null()) || (a_len > 0 && a.is_null()) {
            return fail(BenchlabStatus::NullPointer, "null array or out");
        }
        let s = if s_len == 0 { &[][..] } else { std::slice::from_raw_parts(s, s_len) };
        let a = if a_len == 0 { &[][..] } else { std::slice::from_raw_parts(a, a_len) };
        match true_strength_risk(s, a) {
            Ok(r) => {
                *out = r;
                BenchlabStatus::Ok
            }
            Err(e) => fail(BenchlabStatus::InvalidInput, e),
        }
    })
}
