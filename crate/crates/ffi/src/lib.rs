//! C ABI over the minirace analyzer and oracle.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Every fallible call returns an
//! [`MrStatus`] and leaves a message for [`mr_last_error`] on failure.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::time::Instant;

use minirace::cli::Report;
use minirace::frontend::{build_cfg, parse_program, MachineModel, Program};
use minirace::oracle::{oracle_check, Bounds, OracleResult};
use minirace::race_detect::{analyze, Level, Mode, VerdictKind};

/// Parsed program.
pub struct MrProgram {
    program: Program,
}

/// Analyzer result for one program.
pub struct MrReport {
    report: Report,
    unsupported: Option<CString>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Syntax error or unsupported feature; see `mr_last_error`.
    Frontend = 3,
    InvalidArgument = 4,
    Internal = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrVerdict {
    NoRace = 0,
    Race = 1,
    Unknown = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrMode {
    Combined = 0,
    Under = 1,
    Over = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrMachine {
    Lp64 = 0,
    Ilp32 = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: MrStatus, msg: impl Into<String>) -> MrStatus {
    set_error(msg);
    status
}

/// Run `f`, mapping a panic to `Internal`.
fn guard(f: impl FnOnce() -> MrStatus) -> MrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(MrStatus::Internal, "internal error"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, MrStatus> {
    if p.is_null() {
        return Err(fail(MrStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MrStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn verdict(v: VerdictKind) -> MrVerdict {
    match v {
        VerdictKind::NoRace => MrVerdict::NoRace,
        VerdictKind::Race => MrVerdict::Race,
        VerdictKind::Unknown => MrVerdict::Unknown,
    }
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn mr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version, static.
#[no_mangle]
pub extern "C" fn mr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parse C source text. `file_name` is used in diagnostics and reports.
///
/// # Safety
/// `source` and `file_name` must be NUL-terminated strings; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mr_program_parse(
    source: *const c_char,
    file_name: *const c_char,
    machine: MrMachine,
    out: *mut *mut MrProgram,
) -> MrStatus {
    guard(|| {
        if out.is_null() {
            return fail(MrStatus::NullArgument, "out is null");
        }
        *out = ptr::null_mut();
        let src = match str_arg(source, "source") {
            Ok(s) => s,
            Err(e) => return e,
        };
        let file = match str_arg(file_name, "file_name") {
            Ok(s) => s,
            Err(e) => return e,
        };
        let mm = match machine {
            MrMachine::Lp64 => MachineModel::Lp64,
            MrMachine::Ilp32 => MachineModel::Ilp32,
        };
        match parse_program(src, file, mm) {
            Ok(program) => {
                *out = Box::into_raw(Box::new(MrProgram { program }));
                MrStatus::Ok
            }
            Err(e) => fail(MrStatus::Frontend, format!("{file}: {e}")),
        }
    })
}

/// # Safety
/// `program` must come from `mr_program_parse` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mr_program_free(program: *mut MrProgram) {
    if !program.is_null() {
        drop(Box::from_raw(program));
    }
}

/// Analyze a program. `call_depth` bounds call-string length (2 is the
/// usual choice).
///
/// # Safety
/// `program` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mr_analyze(
    program: *const MrProgram,
    mode: MrMode,
    call_depth: u32,
    out: *mut *mut MrReport,
) -> MrStatus {
    guard(|| {
        if program.is_null() || out.is_null() {
            return fail(MrStatus::NullArgument, "program or out is null");
        }
        *out = ptr::null_mut();
        let p = &(*program).program;
        let mode = match mode {
            MrMode::Combined => Mode::Combined,
            MrMode::Under => Mode::Under,
            MrMode::Over => Mode::Over,
        };
        let start = Instant::now();
        let v = analyze(p, mode, call_depth as usize);
        let report = Report::from_verdict(&p.file, &v, start.elapsed().as_millis() as u64);
        let unsupported = report
            .unsupported
            .as_ref()
            .and_then(|s| CString::new(s.as_str()).ok());
        *out = Box::into_raw(Box::new(MrReport {
            report,
            unsupported,
        }));
        MrStatus::Ok
    })
}

/// Run the bounded interleaving oracle. A result of `Unknown` means the
/// bounds were exceeded.
///
/// # Safety
/// `program` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mr_oracle(
    program: *const MrProgram,
    loops: u32,
    threads: u32,
    states: u64,
    out: *mut MrVerdict,
) -> MrStatus {
    guard(|| {
        if program.is_null() || out.is_null() {
            return fail(MrStatus::NullArgument, "program or out is null");
        }
        if threads == 0 || states == 0 {
            return fail(MrStatus::InvalidArgument, "bounds must be positive");
        }
        let p = &(*program).program;
        let bounds = Bounds {
            loops,
            threads: threads as usize,
            states: states as usize,
        };
        *out = match oracle_check(p, &build_cfg(p), bounds) {
            OracleResult::Race(_) => MrVerdict::Race,
            OracleResult::NoRace => MrVerdict::NoRace,
            OracleResult::BoundExceeded => MrVerdict::Unknown,
        };
        MrStatus::Ok
    })
}

/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mr_report_verdict(report: *const MrReport) -> MrVerdict {
    match report.as_ref() {
        Some(r) => verdict(r.report.verdict),
        None => MrVerdict::Unknown,
    }
}

/// Number of reported race pairs.
///
/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mr_report_race_count(report: *const MrReport) -> usize {
    report.as_ref().map_or(0, |r| r.report.races.len())
}

/// Number of must-level race pairs.
///
/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mr_report_must_count(report: *const MrReport) -> usize {
    report.as_ref().map_or(0, |r| {
        r.report.races.iter().filter(|x| x.level == Level::Must).count()
    })
}

/// Why the verdict is unknown, or null. Owned by the report.
///
/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mr_report_unsupported(report: *const MrReport) -> *const c_char {
    report
        .as_ref()
        .and_then(|r| r.unsupported.as_ref())
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Serialize the report as JSON. Free the string with `mr_string_free`.
///
/// # Safety
/// `report` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mr_report_json(report: *const MrReport, out: *mut *mut c_char) -> MrStatus {
    guard(|| {
        if report.is_null() || out.is_null() {
            return fail(MrStatus::NullArgument, "report or out is null");
        }
        *out = ptr::null_mut();
        let text = match serde_json::to_string(&(*report).report) {
            Ok(t) => t,
            Err(e) => return fail(MrStatus::Internal, e.to_string()),
        };
        match CString::new(text) {
            Ok(s) => {
                *out = s.into_raw();
                MrStatus::Ok
            }
            Err(e) => fail(MrStatus::Internal, e.to_string()),
        }
    })
}

/// # Safety
/// `report` must come from `mr_analyze` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mr_report_free(report: *mut MrReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
