//! C ABI for the bitalloc allocator.
//!
//! Every fallible function returns a [`BitallocStatus`]; on failure the
//! message is available from [`bitalloc_last_error`] on the same thread
//! until the next failing call. Handles are opaque and must be released with
//! their matching `_free` function. Strings returned by the library are owned
//! by the handle they came from.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use bitalloc::error::{Error, ErrorKind};
use bitalloc::manifest::{load_manifest, Manifest};
use bitalloc::mckp::{dominance_filter, dp_exact, exhaustive, greedy_assign, BitAssignment, MckpClass, MckpInstance};
use bitalloc::pipeline::{emit_reports, run_pipeline, RunReport};
use bitalloc::quantizer::{quantize_mse, Signedness};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitallocStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument was malformed: bad UTF-8, index out of range, short buffer.
    InvalidArgument = 2,
    /// The manifest or its referenced files failed validation.
    Manifest = 3,
    /// The target bit-width cannot be met.
    Infeasible = 4,
    /// A numerical failure such as a zero predicted probability.
    Numeric = 5,
    /// An exact solver or oracle exceeded its size budget.
    Budget = 6,
    Io = 7,
    /// An internal panic was caught at the boundary.
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitallocSolver {
    Greedy = 0,
    Dp = 1,
    Exhaustive = 2,
}

/// Per-layer result of an assignment.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BitallocLayer {
    pub bit: u32,
    pub params: u64,
    pub delta_loss: f64,
}

/// Size and loss totals of an assignment.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BitallocTotals {
    pub avg_bits: f64,
    pub capacity_bits: u64,
    pub used_bits: u64,
    pub w_ratio: f64,
    pub total_delta_loss: f64,
}

/// A validated manifest with its model and data loaded.
pub struct BitallocManifest(Manifest);

/// The outcome of a full allocation run.
pub struct BitallocReport {
    report: RunReport,
    names: Vec<CString>,
}

/// A knapsack instance built class by class.
pub struct BitallocInstance {
    classes: Vec<MckpClass>,
    capacity: u64,
    names: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: BitallocStatus, msg: impl Into<String>) -> BitallocStatus {
    set_error(msg);
    status
}

fn from_error(e: &Error) -> BitallocStatus {
    let status = match e.kind() {
        ErrorKind::Manifest => BitallocStatus::Manifest,
        ErrorKind::Infeasible => BitallocStatus::Infeasible,
        ErrorKind::Numeric => BitallocStatus::Numeric,
        ErrorKind::Budget => BitallocStatus::Budget,
        ErrorKind::Io => BitallocStatus::Io,
    };
    fail(status, e.to_string())
}

/// Runs `f`, converting panics into [`BitallocStatus::Panic`].
fn guard(f: impl FnOnce() -> BitallocStatus) -> BitallocStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(BitallocStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, BitallocStatus> {
    if p.is_null() {
        return Err(fail(BitallocStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(BitallocStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

fn names_of(a: &BitAssignment) -> Vec<CString> {
    a.layers
        .iter()
        .map(|l| CString::new(l.name.replace('\0', " ")).unwrap_or_default())
        .collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bitalloc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null if none. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bitalloc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads and validates the manifest at `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bitalloc_manifest_load(
    path: *const c_char,
    out: *mut *mut BitallocManifest,
) -> BitallocStatus {
    guard(|| {
        if out.is_null() {
            return fail(BitallocStatus::NullArgument, "out is null");
        }
        *out = ptr::null_mut();
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_manifest(path) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(BitallocManifest(m)));
                BitallocStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// # Safety
/// `m` must come from [`bitalloc_manifest_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn bitalloc_manifest_free(m: *mut BitallocManifest) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Runs the full allocation described by `m`.
///
/// # Safety
/// `m` must be a live manifest handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bitalloc_plan_run(
    m: *const BitallocManifest,
    out: *mut *mut BitallocReport,
) -> BitallocStatus {
    guard(|| {
        if m.is_null() || out.is_null() {
            return fail(BitallocStatus::NullArgument, "manifest or out is null");
        }
        *out = ptr::null_mut();
        let m = &*m;
        match run_pipeline(&m.0) {
            Ok(report) => {
                let names = report.assignment.as_ref().map(names_of).unwrap_or_default();
                *out = Box::into_raw(Box::new(BitallocReport { report, names }));
                BitallocStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// # Safety
/// `r` must come from [`bitalloc_plan_run`] or be null.
#[no_mangle]
pub unsafe extern "C" fn bitalloc_report_free(r: *mut BitallocReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Number of layers in the report's assignment; 0 for a null handle.
///
/// # Safety
/// `r` must be a live report handle or null.
#[no_mangle]
pub unsafe extern "C" fn bitalloc_report_layer_count(r: *const BitallocReport) -> usize {
    if r.is_null() {
        0
    } else {
        let r = &*r;
        r.names.len()
    }
}

/// Name of layer `index`, owned by the report; null when out of range.
///
/// # Safety
/// `r` must be a live report handle or null.
#[no_mangle]
pub unsafe extern "C" fn bitalloc_report_layer_name(
    r: *const BitallocReport,
    index: usize,
) -> *const c_char {
    if r.is_null() {
        return ptr::null();
    }
    let r = &*r;
    r.names.get(index).map_or(ptr::null(), |n| n.as_ptr())
}

/// # Safety
/// `r` must be a live report handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bitalloc_report_layer(
    r: *const BitallocReport,
    index: usize,
    out: *mut BitallocLayer,
) -> BitallocStatus {
    guard(|| {
        if r.is_null() || out.is_null() {
            return fail(BitallocStatus::NullArgument, "report or out is null");
        }
        let r = &*r;
        let Some(l) = r.report.assignment.as_ref().and_then(|a| a.layers.get(index)) else {
            return fail(BitallocStatus::InvalidArgument, format!("layer index {index} out of range"));
        };
        *out = BitallocLayer {
            bit: l.bit,
            params: l.params,
            delta_loss: l.delta_loss,
        };
        BitallocStatus::Ok
    })
}

fn totals_of(a: &BitAssignment) -> BitallocTotals {
    BitallocTotals {
        avg_bits: a.avg_bits,
        capacity_bits: a.capacity_bits,
        used_bits: a.used_bits,
        w_ratio: a.w_ratio,
        total_delta_loss: a.total_delta_loss,
    }
}

/// # Safety
/// `r` must be a live report handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bitalloc_report_totals(
    r: *const BitallocReport,
    out: *mut BitallocTotals,
) -> BitallocStatus {
    guard(|| {
        if r.is_null() || out.is_null() {
            return fail(BitallocStatus::NullArgument, "report or out is null");
        }
        let r = &*r;
        match &r.report.assignment {
            Some(a) => {
                *out = totals_of(a);
                BitallocStatus::Ok
            }
            None => fail(BitallocStatus::InvalidArgument, "report has no assignment"),
        }
    })
}

/// Writes the report files into `dir`, creating it if needed.
///
/// # Safety
/// `r` must be a live report handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bitalloc_report_write(
    r: *const BitallocReport,
    dir: *const c_char,
) -> BitallocStatus {
    guard(|| {
        if r.is_null() {
            return fail(BitallocStatus::NullArgument, "report is null");
        }
        let dir = match path_arg(dir, "dir") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let r = &*r;
        match emit_reports(&r.report, dir) {
            Ok(_) => BitallocStatus::Ok,
            Err(e) => from_error(&e),
        }
    })
}

/// Empty knapsack instance with the given capacity in bits.
#[no_mangle]
pub extern "C" fn bitalloc_instance_new(capacity_bits: u64) -> *mut BitallocInstance {
    Box::into_raw(Box::new(BitallocInstance {
        classes: Vec::new(),
        capacity: capacity_bits,
        names: Vec::new(),
    }))
}

/// # Safety
/// `inst` must come from [`bitalloc_instance_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn bitalloc_instance_free(inst: *mut BitallocInstance) {
    if !inst.is_null() {
        drop(Box::from_raw(inst));
    }
}

/// Appends a layer with `params` weights whose loss increase at `bits[i]`
/// is `delta_loss[i]`, for `len` candidates.
///
/// # Safety
/// `inst` must be live; `name` NUL-terminated; `bits` and `delta_loss` must
/// each point to `len` readable values.
#[no_mangle]
pub unsafe extern "C" fn bitalloc_instance_add_layer(
    inst: *mut BitallocInstance,
    name: *const c_char,
    params: u64,
    bits: *const u32,
    delta_loss: *const f64,
    len: usize,
) -> BitallocStatus {
    guard(|| {
        if inst.is_null() || name.is_null() || bits.is_null() || delta_loss.is_null() {
            return fail(BitallocStatus::NullArgument, "null argument");
        }
        if len == 0 {
            return fail(BitallocStatus::InvalidArgument, "a layer needs at least one candidate");
        }
        let Ok(name) = CStr::from_ptr(name).to_str() else {
            return fail(BitallocStatus::InvalidArgument, "name is not valid UTF-8");
        };
        let bits = std::slice::from_raw_parts(bits, len);
        let dl = std::slice::from_raw_parts(delta_loss, len);
        if let Some(i) = dl.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return fail(
                BitallocStatus::InvalidArgument,
                format!("delta_loss[{i}] = {} must be finite and non-negative", dl[i]),
            );
        }
        let losses: Vec<(u32, f64)> = bits.iter().copied().zip(dl.iter().copied()).collect();
        let inst = &mut *inst;
        inst.classes.push(MckpClass::from_losses(name, params, &losses));
        inst.names.push(CString::new(name).unwrap_or_default());
        BitallocStatus::Ok
    })
}

/// Filters dominated candidates and solves. `out_bits` receives one bit per
/// layer in insertion order and must hold `out_len >= layer count` entries;
/// `totals` may be null.
///
/// # Safety
/// `inst` must be live; `out_bits` must point to `out_len` writable values;
/// `totals` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn bitalloc_instance_solve(
    inst: *const BitallocInstance,
    solver: BitallocSolver,
    out_bits: *mut u32,
    out_len: usize,
    totals: *mut BitallocTotals,
) -> BitallocStatus {
    guard(|| {
        if inst.is_null() || out_bits.is_null() {
            return fail(BitallocStatus::NullArgument, "instance or out_bits is null");
        }
        let inst = &*inst;
        if out_len < inst.classes.len() {
            return fail(
                BitallocStatus::InvalidArgument,
                format!("out_len {out_len} is below the {} layers", inst.classes.len()),
            );
        }
        let solved = MckpInstance::new(inst.classes.clone(), inst.capacity).and_then(|i| {
            let f = dominance_filter(&i);
            match solver {
                BitallocSolver::Greedy => greedy_assign(&f),
                BitallocSolver::Dp => dp_exact(&f),
                BitallocSolver::Exhaustive => exhaustive(&f),
            }
        });
        match solved {
            Ok(a) => {
                let out = std::slice::from_raw_parts_mut(out_bits, out_len);
                for (o, l) in out.iter_mut().zip(&a.layers) {
                    *o = l.bit;
                }
                if !totals.is_null() {
                    *totals = totals_of(&a);
                }
                BitallocStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Quantizes `len` weights to signed `bits`-bit values with the MSE-optimal
/// step, writing the quantized values to `out` and the step to `step`
/// (which may be null).
///
/// # Safety
/// `w` and `out` must each point to `len` values; `step` valid or null.
#[no_mangle]
pub unsafe extern "C" fn bitalloc_quantize(
    w: *const f64,
    len: usize,
    bits: u32,
    out: *mut f64,
    step: *mut f64,
) -> BitallocStatus {
    guard(|| {
        if w.is_null() || out.is_null() {
            return fail(BitallocStatus::NullArgument, "w or out is null");
        }
        let w = std::slice::from_raw_parts(w, len);
        match quantize_mse(w, bits, Signedness::Signed) {
            Ok(q) => {
                std::slice::from_raw_parts_mut(out, len).copy_from_slice(&q.values);
                if !step.is_null() {
                    *step = q.grid.step();
                }
                BitallocStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}
