//! C ABI over `psopf-core`.
//!
//! Every handle is opaque and owned by the caller once returned; release it
//! with the matching `*_free` function. Functions return a [`PsopfStatus`];
//! on failure `psopf_last_error` holds a message for the calling thread.
//! Strings handed out by the library are NUL-terminated UTF-8 and must be
//! released with `psopf_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use psopf_core::cli::RunConfig;
use psopf_core::control::ControlId;
use psopf_core::netmodel::{parse_case, scale_load, Network};
use psopf_core::opf::{solve_opf, ControlSet, OpfResult};
use psopf_core::powerflow::{
    check_violations, solve_newton_raphson, PowerFlowSolution, ViolationReport,
};
use psopf_core::sensitivity::{
    current_sensitivity, default_candidates, rank_controls, voltage_sensitivity, OperatingPoint,
    SensitivityReport,
};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsopfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    InvalidArgument = 4,
    NotConverged = 5,
    OptimizationFailed = 6,
    BufferTooSmall = 7,
    Panic = 99,
}

/// A bus/branch network model.
pub struct PsopfNetwork {
    inner: Network,
}

/// A converged power-flow solution together with its limit check.
pub struct PsopfSolution {
    network: Network,
    solution: PowerFlowSolution,
    violations: ViolationReport,
}

/// Outcome of one optimal power flow run.
pub struct PsopfOpfResult {
    inner: OpfResult,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: PsopfStatus, msg: impl Into<String>) -> PsopfStatus {
    set_last_error(msg);
    status
}

/// Runs `f`, clearing the last error first and turning panics into `Panic`.
fn guard(f: impl FnOnce() -> PsopfStatus) -> PsopfStatus {
    set_last_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            fail(PsopfStatus::Panic, msg)
        }
    }
}

unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, PsopfStatus> {
    if s.is_null() {
        return Err(fail(PsopfStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|e| fail(PsopfStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn read_opt_str<'a>(s: *const c_char, what: &str) -> Result<Option<&'a str>, PsopfStatus> {
    if s.is_null() {
        Ok(None)
    } else {
        read_str(s, what).map(Some)
    }
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> PsopfStatus {
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            PsopfStatus::Ok
        }
        Err(e) => fail(PsopfStatus::Panic, e.to_string()),
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, PsopfStatus> {
    serde_json::to_string_pretty(value).map_err(|e| fail(PsopfStatus::Panic, e.to_string()))
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(PsopfStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

/// Message describing the most recent failure on this thread, or "".
///
/// The pointer stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn psopf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn psopf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn psopf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates the bundled IEEE 30-bus test network.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn psopf_network_ieee30(out: *mut *mut PsopfNetwork) -> PsopfStatus {
    guard(|| {
        non_null!(out);
        write_out(
            out,
            PsopfNetwork {
                inner: Network::ieee30(),
            },
        );
        PsopfStatus::Ok
    })
}

/// Parses a network from case-file text.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn psopf_network_from_case(
    text: *const c_char,
    out: *mut *mut PsopfNetwork,
) -> PsopfStatus {
    guard(|| {
        non_null!(out);
        let text = try_status!(read_str(text, "text"));
        match parse_case(text) {
            Ok(inner) => {
                write_out(out, PsopfNetwork { inner });
                PsopfStatus::Ok
            }
            Err(e) => fail(PsopfStatus::ParseError, e.to_string()),
        }
    })
}

/// Serializes a network back to case-file text.
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn psopf_network_to_case(
    net: *const PsopfNetwork,
    out: *mut *mut c_char,
) -> PsopfStatus {
    guard(|| {
        non_null!(net, out);
        write_string(out, (*net).inner.to_case_string())
    })
}

/// Number of buses in the network.
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn psopf_network_bus_count(
    net: *const PsopfNetwork,
    out: *mut usize,
) -> PsopfStatus {
    guard(|| {
        non_null!(net, out);
        *out = (*net).inner.n_buses();
        PsopfStatus::Ok
    })
}

/// Total active demand in MW.
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn psopf_network_total_load_mw(
    net: *const PsopfNetwork,
    out: *mut f64,
) -> PsopfStatus {
    guard(|| {
        non_null!(net, out);
        *out = (*net).inner.total_p_demand_mw();
        PsopfStatus::Ok
    })
}

/// Scales every load in place so total active demand equals `total_mw`,
/// keeping each bus's power factor.
///
/// # Safety
/// `net` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn psopf_network_scale_load(
    net: *mut PsopfNetwork,
    total_mw: f64,
) -> PsopfStatus {
    guard(|| {
        non_null!(net);
        match scale_load(&(*net).inner, total_mw) {
            Ok(scaled) => {
                (*net).inner = scaled;
                PsopfStatus::Ok
            }
            Err(e) => fail(PsopfStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Releases a network. Null is a no-op.
///
/// # Safety
/// `net` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn psopf_network_free(net: *mut PsopfNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Solves the power flow at the network's current settings.
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn psopf_powerflow_solve(
    net: *const PsopfNetwork,
    out: *mut *mut PsopfSolution,
) -> PsopfStatus {
    guard(|| {
        non_null!(net, out);
        let network = (*net).inner.clone();
        match solve_newton_raphson(&network, None, &Default::default()) {
            Ok(solution) => {
                let violations = check_violations(&network, &solution);
                write_out(
                    out,
                    PsopfSolution {
                        network,
                        solution,
                        violations,
                    },
                );
                PsopfStatus::Ok
            }
            Err(e) => fail(PsopfStatus::NotConverged, e.to_string()),
        }
    })
}

/// Newton iterations the solve took.
///
/// # Safety
/// `sol` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn psopf_solution_iterations(
    sol: *const PsopfSolution,
    out: *mut usize,
) -> PsopfStatus {
    guard(|| {
        non_null!(sol, out);
        *out = (*sol).solution.iterations;
        PsopfStatus::Ok
    })
}

/// Number of operating-limit violations at the solution.
///
/// # Safety
/// `sol` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn psopf_solution_violation_count(
    sol: *const PsopfSolution,
    out: *mut usize,
) -> PsopfStatus {
    guard(|| {
        non_null!(sol, out);
        *out = (*sol).violations.count();
        PsopfStatus::Ok
    })
}

/// Copies bus voltage magnitudes (pu) and angles (rad) in network bus order.
///
/// Either output may be null to skip it. `len` is the capacity of each
/// buffer and must be at least the bus count.
///
/// # Safety
/// Non-null buffers must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn psopf_solution_voltages(
    sol: *const PsopfSolution,
    v_mag: *mut f64,
    v_angle: *mut f64,
    len: usize,
) -> PsopfStatus {
    guard(|| {
        non_null!(sol);
        let s = &(*sol).solution;
        let n = s.v_mag.len();
        if len < n {
            return fail(
                PsopfStatus::BufferTooSmall,
                format!("need {n} entries, got {len}"),
            );
        }
        if !v_mag.is_null() {
            ptr::copy_nonoverlapping(s.v_mag.as_ptr(), v_mag, n);
        }
        if !v_angle.is_null() {
            ptr::copy_nonoverlapping(s.v_angle.as_ptr(), v_angle, n);
        }
        PsopfStatus::Ok
    })
}

/// JSON object with `solution` and `violations`.
///
/// # Safety
/// `sol` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn psopf_solution_to_json(
    sol: *const PsopfSolution,
    out: *mut *mut c_char,
) -> PsopfStatus {
    guard(|| {
        non_null!(sol, out);
        let s = &*sol;
        let json = try_status!(to_json(&serde_json::json!({
            "solution": s.solution,
            "violations": s.violations,
        })));
        write_string(out, json)
    })
}

/// Releases a solution. Null is a no-op.
///
/// # Safety
/// `sol` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn psopf_solution_free(sol: *mut PsopfSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}

/// Sensitivity matrices and control ranking at the solved point, as JSON.
///
/// `candidates` is a comma-separated list of control labels such as
/// `"V_G2,T_6-9,Q_C10"`; null selects the default candidates. A `top` of 0
/// keeps every ranked control.
///
/// # Safety
/// `sol` must be a live handle; `candidates` null or NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn psopf_sensitivity_json(
    sol: *const PsopfSolution,
    candidates: *const c_char,
    top: usize,
    out: *mut *mut c_char,
) -> PsopfStatus {
    guard(|| {
        non_null!(sol, out);
        let s = &*sol;
        let candidates = try_status!(read_opt_str(candidates, "candidates"));
        let candidates: Vec<ControlId> = match candidates {
            None => default_candidates(&s.network),
            Some(list) => try_status!(list
                .split(',')
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| l.parse::<ControlId>())
                .collect::<Result<_, _>>()
                .map_err(|e| fail(PsopfStatus::InvalidArgument, e.to_string()))),
        };
        let op = match OperatingPoint::new(s.network.clone(), s.solution.clone()) {
            Ok(op) => op,
            Err(e) => return fail(PsopfStatus::NotConverged, e.to_string()),
        };
        let su = match voltage_sensitivity(&op) {
            Ok(su) => su,
            Err(e) => return fail(PsopfStatus::NotConverged, e.to_string()),
        };
        let r = current_sensitivity(&op);
        let mut ranking = match rank_controls(&su, &r, &op.network, &s.violations, &candidates) {
            Ok(r) => r,
            Err(e) => return fail(PsopfStatus::InvalidArgument, e.to_string()),
        };
        if top > 0 {
            ranking.truncate(top);
        }
        let json = try_status!(to_json(&SensitivityReport::build(&su, &r, ranking)));
        write_string(out, json)
    })
}

/// Runs the particle-swarm OPF.
///
/// `controls` is `"full"`, `"pg+vg"`, `"pg+vg:1,2,5,8"` or a comma-separated
/// label list; null means `"full"`. `config_toml` holds optional `[pso]`,
/// `[penalty]` and `[powerflow]` tables; null uses defaults. `seed` always
/// overrides any seed in the configuration.
///
/// # Safety
/// `net` must be a live handle; string arguments null or NUL-terminated;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn psopf_opf_solve(
    net: *const PsopfNetwork,
    controls: *const c_char,
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut PsopfOpfResult,
) -> PsopfStatus {
    guard(|| {
        non_null!(net, out);
        let network = &(*net).inner;
        let controls = try_status!(read_opt_str(controls, "controls")).unwrap_or("full");
        let config = try_status!(read_opt_str(config_toml, "config_toml"));
        let mut cfg = match config {
            None => RunConfig::default(),
            Some(text) => match RunConfig::from_toml(text) {
                Ok((cfg, _)) => cfg,
                Err(e) => return fail(PsopfStatus::ParseError, e),
            },
        };
        cfg.pso.seed = seed;
        let cs = match ControlSet::parse(network, controls) {
            Ok(cs) => cs,
            Err(e) => return fail(PsopfStatus::InvalidArgument, e.to_string()),
        };
        match solve_opf(network, &cs, &cfg.penalty, &cfg.pso) {
            Ok(inner) => {
                write_out(out, PsopfOpfResult { inner });
                PsopfStatus::Ok
            }
            Err(e) => fail(PsopfStatus::OptimizationFailed, e.to_string()),
        }
    })
}

/// Fuel cost in $/hr at the reported optimum.
///
/// # Safety
/// `res` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn psopf_opf_result_cost(
    res: *const PsopfOpfResult,
    out: *mut f64,
) -> PsopfStatus {
    guard(|| {
        non_null!(res, out);
        *out = (*res).inner.best_cost;
        PsopfStatus::Ok
    })
}

/// Number of limit violations at the reported optimum.
///
/// # Safety
/// `res` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn psopf_opf_result_violation_count(
    res: *const PsopfOpfResult,
    out: *mut usize,
) -> PsopfStatus {
    guard(|| {
        non_null!(res, out);
        *out = (*res).inner.violations.count();
        PsopfStatus::Ok
    })
}

/// Full result as JSON: controls, generator outputs, solution, trace.
///
/// # Safety
/// `res` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn psopf_opf_result_to_json(
    res: *const PsopfOpfResult,
    out: *mut *mut c_char,
) -> PsopfStatus {
    guard(|| {
        non_null!(res, out);
        let json = try_status!(to_json(&(*res).inner));
        write_string(out, json)
    })
}

/// Releases an OPF result. Null is a no-op.
///
/// # Safety
/// `res` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn psopf_opf_result_free(res: *mut PsopfOpfResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}
