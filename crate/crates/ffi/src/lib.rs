//! C interface to the cost model.
//!
//! Objects cross the boundary as opaque pointers that the caller releases
//! with the matching `*_free` function. Every fallible call returns an
//! [`MccmStatus`]; on failure [`mccm_last_error`] describes the problem for
//! the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use mccm::bundled;
use mccm::composer::{evaluate, to_f64, EvalReport};
use mccm::descriptors::{CnnModel, FpgaPlatform};
use mccm::notation::{parse_accelerator, parse_for_depth};
use mccm::Error;

/// Result of a call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MccmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Malformed CNN or platform descriptor, or unknown bundled name.
    BadDescriptor = 3,
    /// The sketch does not parse or does not match the CNN.
    BadSketch = 4,
    /// The design does not fit the platform.
    Infeasible = 5,
    Internal = 6,
}

/// A loaded CNN.
pub struct MccmCnn(Arc<CnnModel>);

/// A loaded FPGA platform.
pub struct MccmPlatform(FpgaPlatform);

/// The evaluation of one accelerator.
pub struct MccmReport(EvalReport);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(e: &Error) -> MccmStatus {
    match e {
        Error::Syntax { .. } | Error::Sketch(_) => MccmStatus::BadSketch,
        Error::Infeasible { .. } | Error::InsufficientPes { .. } => MccmStatus::Infeasible,
        Error::SimCap { .. } | Error::Config(_) => MccmStatus::Internal,
        _ => MccmStatus::BadDescriptor,
    }
}

fn fail(status: MccmStatus, message: &str) -> MccmStatus {
    set_error(message);
    status
}

/// Runs `body`, turning errors and panics into status codes.
fn guard(body: impl FnOnce() -> Result<(), MccmStatus>) -> MccmStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            MccmStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(_) => fail(MccmStatus::Internal, "internal panic"),
    }
}

fn lift(e: Error) -> MccmStatus {
    fail(status_of(&e), &e.to_string())
}

/// # Safety
/// `p` must be NULL or point to a NUL-terminated string.
unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, MccmStatus> {
    if p.is_null() {
        return Err(fail(MccmStatus::NullArgument, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MccmStatus::InvalidUtf8, "string is not valid UTF-8"))
}

/// # Safety
/// `out` must be NULL or valid for one pointer write.
unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), MccmStatus> {
    if out.is_null() {
        return Err(fail(MccmStatus::NullArgument, "null output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn unknown(name: &str) -> MccmStatus {
    fail(
        MccmStatus::BadDescriptor,
        &format!("no bundled descriptor named {name:?}"),
    )
}

/// Message of the last failed call on this thread, empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mccm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mccm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a CNN descriptor from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn mccm_cnn_from_json(json: *const c_char, out: *mut *mut MccmCnn) -> MccmStatus {
    guard(|| {
        let cnn = CnnModel::from_json_str(text(json)?).map_err(lift)?;
        put(out, MccmCnn(Arc::new(cnn)))
    })
}

/// Loads one of the CNNs shipped with the library, e.g. "resnet50".
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn mccm_cnn_bundled(name: *const c_char, out: *mut *mut MccmCnn) -> MccmStatus {
    guard(|| {
        let name = text(name)?;
        let cnn = bundled::cnn(name).ok_or_else(|| unknown(name))?;
        put(out, MccmCnn(Arc::new(cnn)))
    })
}

/// Number of layers, 0 for NULL.
///
/// # Safety
/// `cnn` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mccm_cnn_num_layers(cnn: *const MccmCnn) -> usize {
    cnn.as_ref().map_or(0, |c| c.0.num_layers())
}

/// # Safety
/// `cnn` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mccm_cnn_free(cnn: *mut MccmCnn) {
    if !cnn.is_null() {
        drop(Box::from_raw(cnn));
    }
}

/// Parses a platform descriptor from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn mccm_platform_from_json(json: *const c_char, out: *mut *mut MccmPlatform) -> MccmStatus {
    guard(|| {
        let p = FpgaPlatform::from_json_str(text(json)?).map_err(lift)?;
        put(out, MccmPlatform(p))
    })
}

/// Loads one of the boards shipped with the library, e.g. "zc706".
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn mccm_platform_bundled(name: *const c_char, out: *mut *mut MccmPlatform) -> MccmStatus {
    guard(|| {
        let name = text(name)?;
        let p = bundled::platform(name).ok_or_else(|| unknown(name))?;
        put(out, MccmPlatform(p))
    })
}

/// Replaces the on-chip memory budget, in bytes.
///
/// # Safety
/// `platform` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mccm_platform_set_on_chip_bytes(platform: *mut MccmPlatform, bytes: u64) -> MccmStatus {
    guard(|| {
        let p = platform
            .as_mut()
            .ok_or_else(|| fail(MccmStatus::NullArgument, "null platform"))?;
        p.0 = p.0.clone().with_on_chip_bytes(bytes);
        Ok(())
    })
}

/// # Safety
/// `platform` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mccm_platform_free(platform: *mut MccmPlatform) {
    if !platform.is_null() {
        drop(Box::from_raw(platform));
    }
}

/// Builds the accelerator described by `sketch` and evaluates it.
///
/// # Safety
/// `cnn` and `platform` must be live handles, `sketch` a NUL-terminated
/// string and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn mccm_evaluate(
    cnn: *const MccmCnn,
    platform: *const MccmPlatform,
    sketch: *const c_char,
    out: *mut *mut MccmReport,
) -> MccmStatus {
    guard(|| {
        let cnn = cnn.as_ref().ok_or_else(|| fail(MccmStatus::NullArgument, "null CNN"))?;
        let platform = platform
            .as_ref()
            .ok_or_else(|| fail(MccmStatus::NullArgument, "null platform"))?;
        let sketch = parse_accelerator(text(sketch)?, &cnn.0).map_err(lift)?;
        let report = evaluate(&sketch, cnn.0.clone(), &platform.0).map_err(lift)?;
        put(out, MccmReport(report))
    })
}

/// Seconds for one input to pass through the accelerator; NaN for NULL.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mccm_report_latency_s(report: *const MccmReport) -> f64 {
    report.as_ref().map_or(f64::NAN, |r| to_f64(&r.0.latency_s))
}

/// Inputs per second; NaN for NULL.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mccm_report_throughput(report: *const MccmReport) -> f64 {
    report.as_ref().map_or(f64::NAN, |r| to_f64(&r.0.throughput))
}

/// On-chip bytes allocated; 0 for NULL.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mccm_report_buffer_bytes(report: *const MccmReport) -> u64 {
    report.as_ref().map_or(0, |r| r.0.buffer_bytes)
}

/// Off-chip bytes moved per input; 0 for NULL.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mccm_report_access_bytes(report: *const MccmReport) -> u64 {
    report.as_ref().map_or(0, |r| r.0.access_bytes)
}

/// Number of segments; 0 for NULL.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mccm_report_segment_count(report: *const MccmReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.segments.len())
}

/// Segments whose transfers take longer than their compute; 0 for NULL.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mccm_report_memory_bound_segments(report: *const MccmReport) -> usize {
    report
        .as_ref()
        .map_or(0, |r| r.0.segments.iter().filter(|s| s.memory_bound).count())
}

/// The full report as JSON, or NULL for a NULL report. Release with
/// [`mccm_string_free`].
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mccm_report_to_json(report: *const MccmReport) -> *mut c_char {
    let Some(r) = report.as_ref() else {
        return ptr::null_mut();
    };
    match serde_json::to_string(&r.0) {
        Ok(s) => CString::new(s).map_or(ptr::null_mut(), CString::into_raw),
        Err(_) => ptr::null_mut(),
    }
}

/// # Safety
/// `report` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mccm_report_free(report: *mut MccmReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Canonical form of a sketch for a CNN of `depth` layers. Release the
/// result with [`mccm_string_free`].
///
/// # Safety
/// `sketch` must be a NUL-terminated string and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn mccm_format_sketch(sketch: *const c_char, depth: usize, out: *mut *mut c_char) -> MccmStatus {
    guard(|| {
        let parsed = parse_for_depth(text(sketch)?, depth).map_err(lift)?;
        if out.is_null() {
            return Err(fail(MccmStatus::NullArgument, "null output pointer"));
        }
        *out = CString::new(parsed.to_string())
            .map_err(|_| fail(MccmStatus::Internal, "sketch contains NUL"))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mccm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
