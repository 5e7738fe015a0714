//! Command-filtered backstepping laws.
//!
//! Three controllers share one recursion:
//!
//! * `Bcfb`: tracking controller with a safety-switched first auxiliary state,
//! * `Cfb`: the classical command-filtered baseline (always compensating),
//! * `Bpc`: performance controller with a transformed first error and an
//!   adaptive envelope `ρ`.
//!
//! Every function here is pure: the simulator owns the state and integrates
//! the derivatives returned below.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::{CommandFilter, FilterError};
use crate::linalg::{quadratic_form, LinalgError, SquareMatrix};
use crate::perf::{dzt, gamma_level, phi_level, pse_bcfb, pse_bpc, Etf, PerfError, PerformanceSpec};
use crate::plant::{PlantError, PlantModel};

/// Smallest `|g_i|` the recursion will divide by.
pub const G_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("|g{stage}| = {value} is too close to zero")]
    GainSingularity { stage: usize, value: f64 },
    #[error("expected {expected} {what}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("invalid controller parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Bcfb,
    Cfb,
    Bpc,
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControllerKind::Bcfb => "bcfb",
            ControllerKind::Cfb => "cfb",
            ControllerKind::Bpc => "bpc",
        })
    }
}

/// Where the compensated error sits relative to the safety and invariant levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Safe,
    Transition,
    Outside,
    DeadZone,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Safe => "safe",
            Region::Transition => "transition",
            Region::Outside => "outside",
            Region::DeadZone => "dead_zone",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "safe" => Region::Safe,
            "transition" => Region::Transition,
            "outside" => Region::Outside,
            "dead_zone" => Region::DeadZone,
            _ => return None,
        })
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reference value and its derivative at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefPoint {
    pub y: f64,
    pub dy: f64,
}

/// Tracking-controller state: filters for `x_{2,c}..x_{n,c}` and `η1..ηn`.
#[derive(Debug, Clone, PartialEq)]
pub struct BcfbState {
    pub filters: Vec<CommandFilter>,
    pub eta: Vec<f64>,
}

/// Performance-controller state: filters, envelope `ρ` and `η2..ηn`.
#[derive(Debug, Clone, PartialEq)]
pub struct BpcState {
    pub filters: Vec<CommandFilter>,
    pub rho: f64,
    pub eta: Vec<f64>,
}

/// Parameters of the tracking controllers.
#[derive(Debug, Clone, PartialEq)]
pub struct BcfbParams {
    pub gains: Vec<f64>,
    pub sigma: f64,
    /// Level matrix of `V = zᵀ P z`.
    pub p: SquareMatrix,
    /// `X = P⁻¹`, only `X11` is read.
    pub x: SquareMatrix,
}

/// Parameters of the performance controller.
#[derive(Debug, Clone, PartialEq)]
pub struct BpcParams {
    pub gains: Vec<f64>,
    pub nu: f64,
    pub spec: PerformanceSpec,
    pub etf: Etf,
    pub p: SquareMatrix,
    /// Pin `f_p = 1`.
    pub force_safe: bool,
}

/// Everything one evaluation of a control law produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub u_raw: f64,
    pub u_applied: f64,
    /// `sat(u) - u`.
    pub delta_u: f64,
    /// Virtual commands `x_{2,d}..x_{n,d}`.
    pub x_d: Vec<f64>,
    /// Filter rates `ẋ_{2,c}..ẋ_{n,c}`.
    pub xc_dot: Vec<f64>,
    /// Filtering errors `x_{2,e}..x_{n,e}`.
    pub x_e: Vec<f64>,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub f_p: f64,
    pub f_t: f64,
    /// `V` for the tracking controllers, `Φ` for the performance controller.
    pub lyap: f64,
    /// `Γ` for the tracking controllers, 1 for the performance controller.
    pub level: f64,
    pub region: Region,
    /// Tracking error `x1 - y_r`.
    pub e: f64,
    /// ETF scale `μ` (1 for the tracking controllers).
    pub mu: f64,
    pub etf_clamped: bool,
}

fn check_gains(g: &[f64]) -> Result<(), ControlError> {
    for (i, &v) in g.iter().enumerate() {
        if v.abs() < G_EPS || !v.is_finite() {
            return Err(ControlError::GainSingularity { stage: i + 1, value: v });
        }
    }
    Ok(())
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), ControlError> {
    if expected != got {
        return Err(ControlError::Dimension { what, expected, got });
    }
    Ok(())
}

/// Output of the shared recursion.
struct Recursion {
    x_d: Vec<f64>,
    xc_dot: Vec<f64>,
    x_e: Vec<f64>,
    u: f64,
}

/// Runs stages `2..n`: `v_i = (-k_i s_i - f_i - c_i z_{i-1} + ẋ_{i,c}) / g_i`
/// where `c_i` is `coupling(i)`; the first stage command `first` is given.
#[allow(clippy::too_many_arguments)]
fn recursion(
    first: f64,
    gains: &[f64],
    f: &[f64],
    g: &[f64],
    s: &[f64],
    z: &[f64],
    filters: &[CommandFilter],
    coupling: impl Fn(usize) -> f64,
) -> Recursion {
    let n = gains.len();
    if n == 1 {
        return Recursion { x_d: vec![], xc_dot: vec![], x_e: vec![], u: first };
    }
    let mut x_d = Vec::with_capacity(n - 1);
    let mut xc_dot = Vec::with_capacity(n - 1);
    let mut x_e = Vec::with_capacity(n - 1);
    x_d.push(first);
    let mut u = 0.0;
    for i in 1..n {
        let flt = &filters[i - 1];
        let cmd = x_d[i - 1];
        xc_dot.push(flt.derivative(cmd));
        x_e.push(flt.error(cmd));
        let v = (-gains[i] * s[i] - f[i] - coupling(i) * z[i - 1] + xc_dot[i - 1]) / g[i];
        if i + 1 < n {
            x_d.push(v);
        } else {
            u = v;
        }
    }
    Recursion { x_d, xc_dot, x_e, u }
}

/// `s1 = x1 - y_d`, `s_i = x_i - x_{i,c}`, `z = s - η`.
pub fn bcfb_errors(
    x: &[f64],
    y_d: f64,
    filters: &[CommandFilter],
    eta: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), ControlError> {
    let n = x.len();
    check_len("filters", n.saturating_sub(1), filters.len())?;
    check_len("auxiliary states", n, eta.len())?;
    let mut s = Vec::with_capacity(n);
    s.push(x[0] - y_d);
    for i in 1..n {
        s.push(x[i] - filters[i - 1].state);
    }
    let z = s.iter().zip(eta).map(|(s, e)| s - e).collect();
    Ok((s, z))
}

fn classify_bcfb(v: f64, gamma: f64, sigma: f64) -> Region {
    if v <= sigma * gamma {
        Region::Safe
    } else if v >= gamma {
        Region::Outside
    } else {
        Region::Transition
    }
}

fn tracking_control(
    kind: ControllerKind,
    plant: &PlantModel,
    x: &[f64],
    r: RefPoint,
    st: &BcfbState,
    params: &BcfbParams,
    rho: f64,
) -> Result<ControlOutput, ControlError> {
    let n = plant.order();
    check_len("states", n, x.len())?;
    check_len("gains", n, params.gains.len())?;
    let f = plant.f_all(x)?;
    let g = plant.g_all(x)?;
    check_gains(&g)?;
    let (s, z) = bcfb_errors(x, r.y, &st.filters, &st.eta)?;
    let k = &params.gains;
    let e1 = if kind == ControllerKind::Cfb { s[0] } else { z[0] };
    let first = (-k[0] * e1 - f[0] + r.dy) / g[0];
    let rec = recursion(first, k, &f, &g, &s, &z, &st.filters, |i| g[i - 1]);
    let u_applied = plant.saturate(rec.u);
    let v = quadratic_form(&params.p, &z)?;
    let gamma = gamma_level(rho, &params.x)?;
    let f_p = match kind {
        ControllerKind::Bcfb => pse_bcfb(v, gamma, params.sigma * gamma)?,
        _ => 1.0,
    };
    Ok(ControlOutput {
        u_raw: rec.u,
        u_applied,
        delta_u: u_applied - rec.u,
        x_d: rec.x_d,
        xc_dot: rec.xc_dot,
        x_e: rec.x_e,
        region: classify_bcfb(v, gamma, params.sigma),
        s,
        z,
        f,
        g,
        f_p,
        f_t: 1.0,
        lyap: v,
        level: gamma,
        e: x[0] - r.y,
        mu: 1.0,
        etf_clamped: false,
    })
}

/// Tracking controller: first virtual command built from `z1`.
pub fn bcfb_control(
    plant: &PlantModel,
    x: &[f64],
    r: RefPoint,
    st: &BcfbState,
    params: &BcfbParams,
    rho: f64,
) -> Result<ControlOutput, ControlError> {
    tracking_control(ControllerKind::Bcfb, plant, x, r, st, params, rho)
}

/// Baseline: first virtual command built from `s1`, `f_p ≡ 1`.
pub fn cfb_control(
    plant: &PlantModel,
    x: &[f64],
    r: RefPoint,
    st: &BcfbState,
    params: &BcfbParams,
    rho: f64,
) -> Result<ControlOutput, ControlError> {
    tracking_control(ControllerKind::Cfb, plant, x, r, st, params, rho)
}

/// Deviation term driving the first auxiliary state:
/// `g1 (η2 + x_{2,e})`, or `g1 Δu` for a scalar plant.
fn first_deviation(g: &[f64], eta_next: Option<f64>, x_e: &[f64], delta_u: f64) -> f64 {
    match eta_next {
        Some(eta2) => g[0] * (eta2 + x_e[0]),
        None => g[0] * delta_u,
    }
}

/// `η̇_i = -k_i η_i + g_i (η_{i+1} + x_{i+1,e})` for `1 ≤ i < n` (`i` zero-based
/// offsets into `eta`), `η̇_n = -k_n η_n + g_n Δu`.
fn tail_aux(eta: &[f64], first_stage: usize, gains: &[f64], g: &[f64], x_e: &[f64], delta_u: f64, out: &mut [f64]) {
    // `eta[j]` belongs to plant stage `first_stage + j`
    let n = gains.len();
    for (j, d) in out.iter_mut().enumerate() {
        let i = first_stage + j;
        *d = if i + 1 < n {
            -gains[i] * eta[j] + g[i] * (eta[j + 1] + x_e[i])
        } else {
            -gains[i] * eta[j] + g[i] * delta_u
        };
    }
}

/// Auxiliary-state derivative of the tracking controller.
pub fn bcfb_aux_derivative(eta: &[f64], f_p: f64, gains: &[f64], g: &[f64], x_e: &[f64], delta_u: f64) -> Vec<f64> {
    let n = gains.len();
    let mut d = vec![0.0; n];
    let dev = first_deviation(g, eta.get(1).copied(), x_e, delta_u);
    d[0] = -f_p * gains[0] * eta[0] + (1.0 - f_p) * dev;
    tail_aux(&eta[1..], 1, gains, g, x_e, delta_u, &mut d[1..]);
    d
}

/// Auxiliary-state derivative of the baseline.
pub fn cfb_aux_derivative(eta: &[f64], gains: &[f64], g: &[f64], x_e: &[f64], delta_u: f64) -> Vec<f64> {
    let mut d = vec![0.0; gains.len()];
    tail_aux(eta, 0, gains, g, x_e, delta_u, &mut d);
    d
}

/// `z1 = T⁻¹(e/ρ)`, `s_i = x_i - x_{i,c}`, `z_i = s_i - η_i` for `i ≥ 2`.
/// Returns `(s, z, ETF point)`; `s1 = z1`.
pub fn bpc_errors(
    x: &[f64],
    y_r: f64,
    st: &BpcState,
    etf: &Etf,
) -> Result<(Vec<f64>, Vec<f64>, crate::perf::EtfPoint), ControlError> {
    let n = x.len();
    check_len("filters", n.saturating_sub(1), st.filters.len())?;
    check_len("auxiliary states", n.saturating_sub(1), st.eta.len())?;
    let pt = etf.point(x[0] - y_r, st.rho)?;
    let mut s = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    s.push(pt.z1);
    z.push(pt.z1);
    for ((xi, fl), eta) in x[1..n].iter().zip(&st.filters).zip(&st.eta) {
        let si = xi - fl.state;
        s.push(si);
        z.push(si - eta);
    }
    Ok((s, z, pt))
}

fn classify_bpc(phi: f64, phi0: f64, ratio: f64, eps: f64) -> Region {
    if phi <= phi0 {
        Region::Safe
    } else if ratio.abs() <= eps {
        Region::DeadZone
    } else if phi >= 1.0 {
        Region::Outside
    } else {
        Region::Transition
    }
}

/// Performance controller.
pub fn bpc_control(
    plant: &PlantModel,
    x: &[f64],
    r: RefPoint,
    st: &BpcState,
    params: &BpcParams,
) -> Result<ControlOutput, ControlError> {
    let n = plant.order();
    check_len("states", n, x.len())?;
    check_len("gains", n, params.gains.len())?;
    let f = plant.f_all(x)?;
    let g = plant.g_all(x)?;
    check_gains(&g)?;
    let (s, z, pt) = bpc_errors(x, r.y, st, &params.etf)?;
    let k = &params.gains;
    let mu = pt.mu;
    let first = (-k[0] * mu.powf(params.nu - 1.0) * z[0] - f[0] + r.dy) / g[0];
    let rec = recursion(first, k, &f, &g, &s, &z, &st.filters, |i| if i == 1 { g[0] * mu } else { g[i - 1] });
    let u_applied = plant.saturate(rec.u);
    let phi = phi_level(&z, &params.p, mu, params.nu)?;
    let spec = &params.spec;
    let f_p = if params.force_safe { 1.0 } else { pse_bpc(phi, spec.phi0) };
    let e = x[0] - r.y;
    let f_t = dzt(e, st.rho, spec.epsilon_dz);
    Ok(ControlOutput {
        u_raw: rec.u,
        u_applied,
        delta_u: u_applied - rec.u,
        x_d: rec.x_d,
        xc_dot: rec.xc_dot,
        x_e: rec.x_e,
        region: classify_bpc(phi, spec.phi0, e / st.rho, spec.epsilon_dz),
        s,
        z,
        f,
        g,
        f_p,
        f_t,
        lyap: phi,
        level: 1.0,
        e,
        mu,
        etf_clamped: pt.clamped,
    })
}

/// Derivatives of the performance controller's envelope and auxiliary states.
#[derive(Debug, Clone, PartialEq)]
pub struct BpcAuxRate {
    pub rho_dot: f64,
    pub eta_dot: Vec<f64>,
    /// The floor guard zeroed a negative `ρ̇`.
    pub floor_hit: bool,
}

/// `ρ̇ = -f_p k_ρ (ρ - ρ∞) + (1 - f_p) f_t (ρ/e) g1 (η2 + x_{2,e})`, with the
/// second term skipped whenever `f_t = 0` and `ρ` held at `ρ∞/2`.
#[allow(clippy::too_many_arguments)]
pub fn bpc_aux_derivative(
    st: &BpcState,
    f_p: f64,
    f_t: f64,
    e: f64,
    gains: &[f64],
    g: &[f64],
    x_e: &[f64],
    delta_u: f64,
    spec: &PerformanceSpec,
) -> BpcAuxRate {
    let mut rho_dot = -f_p * spec.k_rho * (st.rho - spec.rho_inf);
    if f_t > 0.0 && f_p < 1.0 {
        let dev = first_deviation(g, st.eta.first().copied(), x_e, delta_u);
        rho_dot += (1.0 - f_p) * f_t * (st.rho / e) * dev;
    }
    let mut floor_hit = false;
    if st.rho <= 0.5 * spec.rho_inf && rho_dot < 0.0 {
        rho_dot = 0.0;
        floor_hit = true;
    }
    let mut eta_dot = vec![0.0; st.eta.len()];
    tail_aux(&st.eta, 1, gains, g, x_e, delta_u, &mut eta_dot);
    BpcAuxRate { rho_dot, eta_dot, floor_hit }
}

/// Sets every filter to its own command, stage by stage, so all filtering
/// errors start at zero.
#[allow(clippy::too_many_arguments)]
pub fn init_filters(
    kind: ControllerKind,
    plant: &PlantModel,
    x: &[f64],
    r: RefPoint,
    taus: &[f64],
    gains: &[f64],
    nu: f64,
    bpc: Option<(&Etf, f64)>,
) -> Result<Vec<CommandFilter>, ControlError> {
    let n = plant.order();
    check_len("states", n, x.len())?;
    check_len("filter time constants", n.saturating_sub(1), taus.len())?;
    let f = plant.f_all(x)?;
    let g = plant.g_all(x)?;
    check_gains(&g)?;
    // (z1, gain scale on z1, μ)
    let (z1, lead, mu) = match (kind, bpc) {
        (ControllerKind::Bpc, Some((etf, rho))) => {
            let pt = etf.point(x[0] - r.y, rho)?;
            (pt.z1, pt.mu.powf(nu - 1.0), pt.mu)
        }
        (ControllerKind::Bpc, None) => {
            return Err(ControlError::Invalid("performance controller needs an envelope".into()))
        }
        _ => (x[0] - r.y, 1.0, 1.0),
    };
    let mut filters = Vec::with_capacity(n.saturating_sub(1));
    if n == 1 {
        return Ok(filters);
    }
    // η = 0 and ẋ_c = 0 at the start, so s = z along the way
    let mut cmd = (-gains[0] * lead * z1 - f[0] + r.dy) / g[0];
    let mut z_prev = z1;
    for i in 1..n {
        filters.push(CommandFilter::init(taus[i - 1], cmd)?);
        if i + 1 < n {
            let si = x[i] - cmd;
            let c = if kind == ControllerKind::Bpc && i == 1 { g[0] * mu } else { g[i - 1] };
            let next = (-gains[i] * si - f[i] - c * z_prev) / g[i];
            z_prev = si;
            cmd = next;
        }
    }
    Ok(filters)
}
