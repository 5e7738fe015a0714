#![allow(clippy::missing_safety_doc, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]
//! C interface to `bcl_core`.
//!
//! Scenarios, certificates and traces cross the boundary as opaque handles,
//! each released with its `bcl_*_free`. Every fallible call
//! returns a [`BclStatus`]; the message for the last failure on the calling
//! thread is available from [`bcl_last_error`]. Strings returned by the
//! library must be released with [`bcl_string_free`].

mod error;

use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use bcl_core::invariant::{search_trivial_solution, SearchRequest};
use bcl_core::perf::{ppf, Etf, PerformanceSpec};
use bcl_core::plant::{saturate, GainBounds};
use bcl_core::sim::{RunOptions, TraceRow};
use bcl_core::{InvariantCertificate, LmiForm, Scenario, SimulationTrace};

pub use error::{bcl_last_error, BclStatus};
use error::{guard, Failure};

/// Parsed scenario.
pub struct BclScenario {
    inner: Scenario,
    base_dir: std::path::PathBuf,
}

/// Invariant-set certificate.
pub struct BclCertificate {
    inner: InvariantCertificate,
}

/// Recorded closed-loop run.
pub struct BclTrace {
    inner: SimulationTrace,
}

/// Matrix-inequality form used by a certificate search.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BclLmiForm {
    Eq5 = 0,
    HMatrix = 1,
}

/// Scalar fields of a certificate.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BclCertificateInfo {
    pub order: usize,
    pub feasible: bool,
    pub disturbance_ok: bool,
    /// NaN when the certificate carries no `V_h`.
    pub v_h: f64,
    pub alpha: f64,
    pub eps_lmi: f64,
    pub kappa: f64,
    pub gamma_inf: f64,
    pub decay_slack: f64,
    pub coupling_slack: f64,
    /// NaN when not computed.
    pub witness_slack: f64,
}

/// Options for [`bcl_simulate`]; pass NULL for the scenario's own settings.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BclRunOptions {
    /// Disturbance variant, 0 is nominal.
    pub seed: u64,
    /// 0 keeps the scenario's value.
    pub record_every: usize,
    pub force: bool,
}

/// Run statistics over every integration step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BclSummary {
    pub steps: usize,
    pub max_abs_s1: f64,
    pub max_abs_e: f64,
    pub max_level_ratio: f64,
    pub max_envelope_ratio: f64,
    pub violations: usize,
    pub level_exits: usize,
    pub saturation_duty: f64,
    pub initial_level_ratio: f64,
    pub certified: bool,
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::null(what))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s).map(CString::into_raw).map_err(|_| Failure::invalid("string contains NUL"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bcl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Releases a string returned by the library. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn bcl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses scenario TOML. Relative paths inside it resolve against the
/// current directory.
#[no_mangle]
pub unsafe extern "C" fn bcl_scenario_from_toml(text: *const c_char, out: *mut *mut BclScenario) -> BclStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = Scenario::from_toml(str_arg(text, "text")?)?;
        *out = Box::into_raw(Box::new(BclScenario { inner, base_dir: ".".into() }));
        Ok(())
    })
}

/// Loads a scenario file.
#[no_mangle]
pub unsafe extern "C" fn bcl_scenario_load(path: *const c_char, out: *mut *mut BclScenario) -> BclStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = Path::new(str_arg(path, "path")?);
        let inner = Scenario::load(path)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| ".".into());
        *out = Box::into_raw(Box::new(BclScenario { inner, base_dir }));
        Ok(())
    })
}

/// Serializes a scenario back to TOML.
#[no_mangle]
pub unsafe extern "C" fn bcl_scenario_to_toml(sc: *const BclScenario, out: *mut *mut c_char) -> BclStatus {
    guard(|| {
        let sc = ref_arg(sc, "scenario")?;
        let out = out_arg(out, "out")?;
        *out = into_c_string(sc.inner.to_toml())?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn bcl_scenario_free(sc: *mut BclScenario) {
    if !sc.is_null() {
        drop(Box::from_raw(sc));
    }
}

/// Searches a trivial certificate for stage gains `gains[0..n]` with every
/// input gain in `[g_min, g_max]`. An infeasible result is still returned
/// through `out` together with an `Infeasible` status.
#[no_mangle]
pub unsafe extern "C" fn bcl_certificate_search(
    gains: *const f64,
    n: usize,
    kappa: f64,
    w_scale: f64,
    g_min: f64,
    g_max: f64,
    form: BclLmiForm,
    out: *mut *mut BclCertificate,
) -> BclStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if gains.is_null() {
            return Err(Failure::null("gains"));
        }
        if n == 0 {
            return Err(Failure::invalid("need at least one gain"));
        }
        if !(w_scale > 0.0) || !(g_min > 0.0 && g_max >= g_min) {
            return Err(Failure::invalid("need w_scale > 0 and 0 < g_min <= g_max"));
        }
        let gains = std::slice::from_raw_parts(gains, n).to_vec();
        let mut req = SearchRequest::prop1(gains, kappa, w_scale);
        req.g_bounds = vec![GainBounds { g_min, g_max }; n];
        req.form = match form {
            BclLmiForm::Eq5 => LmiForm::Eq5,
            BclLmiForm::HMatrix => LmiForm::HMatrix,
        };
        let inner = search_trivial_solution(&req)?;
        let feasible = inner.feasible;
        *out = Box::into_raw(Box::new(BclCertificate { inner }));
        if feasible {
            Ok(())
        } else {
            Err(Failure::new(BclStatus::Infeasible, "no feasible point on the search grid"))
        }
    })
}

/// Parses the text form written by `bcl check-lmi --out`.
#[no_mangle]
pub unsafe extern "C" fn bcl_certificate_from_text(text: *const c_char, out: *mut *mut BclCertificate) -> BclStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = InvariantCertificate::from_text(str_arg(text, "text")?)?;
        *out = Box::into_raw(Box::new(BclCertificate { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn bcl_certificate_to_text(cert: *const BclCertificate, out: *mut *mut c_char) -> BclStatus {
    guard(|| {
        let cert = ref_arg(cert, "certificate")?;
        let out = out_arg(out, "out")?;
        *out = into_c_string(cert.inner.to_text())?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn bcl_certificate_info(cert: *const BclCertificate, out: *mut BclCertificateInfo) -> BclStatus {
    guard(|| {
        let c = &ref_arg(cert, "certificate")?.inner;
        let out = out_arg(out, "out")?;
        *out = BclCertificateInfo {
            order: c.n(),
            feasible: c.feasible,
            disturbance_ok: c.disturbance_ok,
            v_h: c.v_h.unwrap_or(f64::NAN),
            alpha: c.alpha,
            eps_lmi: c.eps_lmi,
            kappa: c.kappa,
            gamma_inf: c.gamma_inf,
            decay_slack: c.decay_slack,
            coupling_slack: c.coupling_slack,
            witness_slack: c.witness_slack.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn bcl_certificate_free(cert: *mut BclCertificate) {
    if !cert.is_null() {
        drop(Box::from_raw(cert));
    }
}

/// Runs a scenario. `cert` and `opts` may be NULL; without a certificate the
/// scenario's own (file or search) is used.
#[no_mangle]
pub unsafe extern "C" fn bcl_simulate(
    sc: *const BclScenario,
    cert: *const BclCertificate,
    opts: *const BclRunOptions,
    out: *mut *mut BclTrace,
) -> BclStatus {
    guard(|| {
        let sc = ref_arg(sc, "scenario")?;
        let out = out_arg(out, "out")?;
        let cert = cert.as_ref().map(|c| c.inner.clone());
        let opts = opts.as_ref().copied().unwrap_or_default();
        let sim = sc.inner.build(&sc.base_dir, cert)?;
        let mut cfg = sc.inner.sim;
        cfg.seed = opts.seed;
        if opts.record_every > 0 {
            cfg.record_every = opts.record_every;
        }
        let (inner, _) = sim.run(&cfg, RunOptions { force: opts.force })?;
        *out = Box::into_raw(Box::new(BclTrace { inner }));
        Ok(())
    })
}

/// Number of recorded rows; 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn bcl_trace_len(tr: *const BclTrace) -> usize {
    tr.as_ref().map_or(0, |t| t.inner.rows.len())
}

#[no_mangle]
pub unsafe extern "C" fn bcl_trace_summary(tr: *const BclTrace, out: *mut BclSummary) -> BclStatus {
    guard(|| {
        let s = &ref_arg(tr, "trace")?.inner.summary;
        let out = out_arg(out, "out")?;
        *out = BclSummary {
            steps: s.steps,
            max_abs_s1: s.max_abs_s1,
            max_abs_e: s.max_abs_e,
            max_level_ratio: s.max_level_ratio,
            max_envelope_ratio: s.max_envelope_ratio,
            violations: s.violations,
            level_exits: s.level_exits,
            saturation_duty: s.saturation_duty(),
            initial_level_ratio: s.initial_level_ratio,
            certified: s.certified,
        };
        Ok(())
    })
}

fn indexed(name: &str, prefix: &str, v: &[f64]) -> Option<f64> {
    let i: usize = name.strip_prefix(prefix)?.parse().ok()?;
    v.get(i.checked_sub(1)?).copied()
}

fn row_value(r: &TraceRow, name: &str) -> Option<f64> {
    Some(match name {
        "t" => r.t,
        "rho" => r.rho,
        "gamma" => r.gamma,
        "lyap" => r.lyap,
        "f_p" => r.f_p,
        "f_t" => r.f_t,
        "u_raw" => r.u_raw,
        "u_applied" => r.u_applied,
        "delta_u" => r.delta_u,
        "y_ref" => r.y_ref,
        "e" => r.e,
        "mu" => r.mu,
        _ => {
            // filtering errors start at stage 2
            if let Some(i) = name.strip_prefix("xe").and_then(|v| v.parse::<usize>().ok()) {
                return r.x_e.get(i.checked_sub(2)?).copied();
            }
            return indexed(name, "x", &r.x)
                .or_else(|| indexed(name, "s", &r.s))
                .or_else(|| indexed(name, "z", &r.z))
                .or_else(|| indexed(name, "eta", &r.eta));
        }
    })
}

/// Copies column `name` (CSV header names such as `x1`, `rho`, `u_applied`)
/// into `buf`. With `buf` NULL only `*len_out` is set. Fails with
/// `BufferTooSmall` when `cap` is less than the row count.
#[no_mangle]
pub unsafe extern "C" fn bcl_trace_column(
    tr: *const BclTrace,
    name: *const c_char,
    buf: *mut f64,
    cap: usize,
    len_out: *mut usize,
) -> BclStatus {
    guard(|| {
        let rows = &ref_arg(tr, "trace")?.inner.rows;
        let name = str_arg(name, "name")?;
        let len_out = out_arg(len_out, "len_out")?;
        let first = rows.first().ok_or_else(|| Failure::invalid("trace is empty"))?;
        if row_value(first, name).is_none() {
            return Err(Failure::invalid(format!("unknown column {name:?}")));
        }
        *len_out = rows.len();
        if buf.is_null() {
            return Ok(());
        }
        if cap < rows.len() {
            return Err(Failure::new(BclStatus::BufferTooSmall, format!("need {} slots, got {cap}", rows.len())));
        }
        let dst = std::slice::from_raw_parts_mut(buf, rows.len());
        for (d, r) in dst.iter_mut().zip(rows) {
            *d = row_value(r, name).unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn bcl_trace_to_csv(tr: *const BclTrace, out: *mut *mut c_char) -> BclStatus {
    guard(|| {
        let tr = ref_arg(tr, "trace")?;
        let out = out_arg(out, "out")?;
        *out = into_c_string(tr.inner.to_csv())?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn bcl_trace_free(tr: *mut BclTrace) {
    if !tr.is_null() {
        drop(Box::from_raw(tr));
    }
}

/// Performance function `ρ(t)`.
#[no_mangle]
pub unsafe extern "C" fn bcl_ppf(rho0: f64, rho_inf: f64, kappa: f64, t: f64, out: *mut f64) -> BclStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec = PerformanceSpec { kappa, ..PerformanceSpec::new(rho0, rho_inf) };
        spec.validate().map_err(|e| Failure::invalid(e.to_string()))?;
        *out = ppf(&spec, t);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn bcl_saturate(u: f64, u_min: f64, u_max: f64, out: *mut f64) -> BclStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = saturate(u, u_min, u_max).map_err(|e| Failure::invalid(e.to_string()))?;
        Ok(())
    })
}

/// Error transform `T(z)` on the band `(-delta_underbar, delta_bar)`.
#[no_mangle]
pub unsafe extern "C" fn bcl_etf_forward(delta_bar: f64, delta_underbar: f64, z: f64, out: *mut f64) -> BclStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let etf = Etf::new(delta_bar, delta_underbar).map_err(|e| Failure::invalid(e.to_string()))?;
        *out = etf.forward(z);
        Ok(())
    })
}

/// `T⁻¹(r)`; ratios outside the band are clamped just inside it.
#[no_mangle]
pub unsafe extern "C" fn bcl_etf_inverse(delta_bar: f64, delta_underbar: f64, r: f64, out: *mut f64) -> BclStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let etf = Etf::new(delta_bar, delta_underbar).map_err(|e| Failure::invalid(e.to_string()))?;
        *out = etf.inverse(r).map_err(|e| Failure::invalid(e.to_string()))?;
        Ok(())
    })
}
