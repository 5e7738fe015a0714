//! Closed-loop integration, traces, event logs and run comparison.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::{
    bcfb_aux_derivative, bcfb_control, bpc_aux_derivative, bpc_control, cfb_aux_derivative, cfb_control, init_filters,
    BcfbParams, BcfbState, BpcParams, BpcState, ControlError, ControlOutput, ControllerKind, RefPoint, Region,
};
use crate::filters::CommandFilter;
use crate::invariant::InvariantCertificate;
use crate::perf::{ppf, PerfError, PerformanceSpec};
use crate::plant::{DisturbanceSchedule, PlantModel};

/// Relative slack used when counting envelope and level violations.
pub const VIOLATION_TOL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("certificate is infeasible (pass force to run anyway)")]
    CertificateInfeasible,
    #[error("state became non-finite at t = {t}")]
    NonFinite { t: f64 },
    #[error("time grids differ: {0}")]
    GridMismatch(String),
    #[error("invalid simulation setup: {0}")]
    InvalidConfig(String),
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("control law failed at t = {t}: {source}")]
    Control { t: f64, source: ControlError },
    #[error(transparent)]
    Perf(#[from] PerfError),
}

/// One classical Runge–Kutta step of `ẏ = f(t, y)`.
pub fn rk4_step<F, E>(mut f: F, t: f64, y: &[f64], h: f64) -> Result<Vec<f64>, E>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, E>,
{
    let axpy = |a: f64, k: &[f64]| -> Vec<f64> { y.iter().zip(k).map(|(y, k)| y + a * k).collect() };
    let k1 = f(t, y)?;
    let k2 = f(t + 0.5 * h, &axpy(0.5 * h, &k1))?;
    let k3 = f(t + 0.5 * h, &axpy(0.5 * h, &k2))?;
    let k4 = f(t + h, &axpy(h, &k3))?;
    Ok((0..y.len()).map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect())
}

/// One explicit Euler step.
pub fn euler_step<F, E>(mut f: F, t: f64, y: &[f64], h: f64) -> Result<Vec<f64>, E>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, E>,
{
    let k = f(t, y)?;
    Ok(y.iter().zip(&k).map(|(y, k)| y + h * k).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Rk4,
    Euler,
}

fn default_h() -> f64 {
    2e-4
}
fn default_horizon() -> f64 {
    30.0
}
fn default_record_every() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub integrator: Integrator,
    /// Record every k-th step; events and summaries still see every step.
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// 0 runs the nominal disturbance; other values pick a seeded variant.
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            h: default_h(),
            horizon: default_horizon(),
            integrator: Integrator::Rk4,
            record_every: default_record_every(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(SimError::InvalidConfig(format!("step h = {} must be positive", self.h)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SimError::InvalidConfig(format!("horizon = {} must be positive", self.horizon)));
        }
        if self.record_every == 0 {
            return Err(SimError::InvalidConfig("record_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.h).round() as usize
    }

    /// Same grid and integrator (the seed may differ).
    pub fn same_grid(&self, other: &SimConfig) -> bool {
        self.h == other.h
            && self.horizon == other.horizon
            && self.integrator == other.integrator
            && self.record_every == other.record_every
    }
}

/// Reference trajectory `y_r(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "signal", rename_all = "lowercase", deny_unknown_fields)]
pub enum ReferenceSignal {
    #[default]
    Sin,
    Zero,
    Constant {
        value: f64,
    },
}

impl ReferenceSignal {
    pub fn at(&self, t: f64) -> RefPoint {
        match *self {
            ReferenceSignal::Sin => RefPoint { y: t.sin(), dy: t.cos() },
            ReferenceSignal::Zero => RefPoint { y: 0.0, dy: 0.0 },
            ReferenceSignal::Constant { value } => RefPoint { y: value, dy: 0.0 },
        }
    }
}

/// Controller choice plus everything it needs.
#[derive(Debug, Clone)]
pub struct ControllerSetup {
    pub kind: ControllerKind,
    pub gains: Vec<f64>,
    pub taus: Vec<f64>,
    pub nu: f64,
    pub force_safe: bool,
    pub spec: PerformanceSpec,
    pub cert: InvariantCertificate,
}

/// A fully specified closed loop.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub plant: PlantModel,
    pub disturbance: DisturbanceSchedule,
    pub reference: ReferenceSignal,
    pub controller: ControllerSetup,
    pub x0: Vec<f64>,
}

/// Jitters pulse times by up to ±1 s and scales the amplitude into
/// `[0.5, 1.5]`; seed 0 returns the schedule unchanged.
pub fn disturbance_variant(base: &DisturbanceSchedule, seed: u64) -> DisturbanceSchedule {
    if seed == 0 {
        return base.clone();
    }
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut out = base.clone();
    for t in &mut out.pulse_times {
        *t = (*t + rng.random_range(-1.0..=1.0)).max(0.0);
    }
    out.pulse_amp *= rng.random_range(0.5..=1.5);
    out
}

/// Per-step record.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
    /// `η1..ηn`; the performance controller has no `η1` and records 0.
    pub eta: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub lyap: f64,
    pub f_p: f64,
    pub f_t: f64,
    pub u_raw: f64,
    pub u_applied: f64,
    pub delta_u: f64,
    pub region: Region,
    pub x_e: Vec<f64>,
    pub y_ref: f64,
    pub e: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    SaturationOn,
    SaturationOff,
    EnterSafe,
    ExitSafe,
    EnterOmega,
    ExitOmega,
    EnterDeadZone,
    ExitDeadZone,
    EtfClamp,
    RhoFloor,
}

impl EventKind {
    pub const ALL: [EventKind; 10] = [
        EventKind::SaturationOn,
        EventKind::SaturationOff,
        EventKind::EnterSafe,
        EventKind::ExitSafe,
        EventKind::EnterOmega,
        EventKind::ExitOmega,
        EventKind::EnterDeadZone,
        EventKind::ExitDeadZone,
        EventKind::EtfClamp,
        EventKind::RhoFloor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::SaturationOn => "SaturationOn",
            EventKind::SaturationOff => "SaturationOff",
            EventKind::EnterSafe => "EnterSafe",
            EventKind::ExitSafe => "ExitSafe",
            EventKind::EnterOmega => "EnterOmega",
            EventKind::ExitOmega => "ExitOmega",
            EventKind::EnterDeadZone => "EnterDeadZone",
            EventKind::ExitDeadZone => "ExitDeadZone",
            EventKind::EtfClamp => "EtfClamp",
            EventKind::RhoFloor => "RhoFloor",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        EventKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown event {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn push(&mut self, t: f64, kind: EventKind) {
        self.events.push(Event { t, kind });
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn of(&self, kind: EventKind) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// One `t kind` pair per line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# t event\n");
        for e in &self.events {
            let _ = writeln!(out, "{:.9} {}", e.t, e.kind);
        }
        out
    }

    pub fn from_text(s: &str) -> Result<Self, SimError> {
        let mut log = EventLog::default();
        for (no, line) in s.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let bad = || SimError::MalformedTrace(format!("event line {}: {line:?}", no + 1));
            let t: f64 = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let kind: EventKind = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            log.push(t, kind);
        }
        Ok(log)
    }

    /// Region at time `t` rebuilt from the enter/exit events alone.
    pub fn region_at(&self, t: f64) -> Region {
        let (mut safe, mut outside, mut dz) = (false, false, false);
        for e in self.events.iter().take_while(|e| e.t <= t) {
            match e.kind {
                EventKind::EnterSafe => safe = true,
                EventKind::ExitSafe => safe = false,
                EventKind::ExitOmega => outside = true,
                EventKind::EnterOmega => outside = false,
                EventKind::EnterDeadZone => dz = true,
                EventKind::ExitDeadZone => dz = false,
                _ => {}
            }
        }
        if safe {
            Region::Safe
        } else if dz {
            Region::DeadZone
        } else if outside {
            Region::Outside
        } else {
            Region::Transition
        }
    }
}

/// Statistics over every integration step (never decimated).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimSummary {
    pub steps: usize,
    pub max_abs_s1: f64,
    pub max_abs_e: f64,
    /// `max V/Γ` (tracking) or `max Φ` (performance).
    pub max_level_ratio: f64,
    /// `max |z1|/ρ` (tracking) or `max |e|/(δ ρ)` (performance).
    pub max_envelope_ratio: f64,
    /// Steps violating the envelope.
    pub violations: usize,
    /// Steps outside the invariant level.
    pub level_exits: usize,
    pub first_violation: Option<f64>,
    pub saturated_steps: usize,
    pub initial_level_ratio: f64,
    pub initial_envelope_ratio: f64,
    pub certified: bool,
}

impl SimSummary {
    pub fn saturation_duty(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.saturated_steps as f64 / self.steps as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub kind: ControllerKind,
    pub n: usize,
    pub config: SimConfig,
    pub rows: Vec<TraceRow>,
    pub summary: SimSummary,
}

/// Run-time switches.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOptions {
    /// Run despite a failed precondition or an infeasible certificate.
    pub force: bool,
}

#[derive(Debug, Clone)]
enum CtlState {
    Tracking(BcfbState),
    Perf(BpcState),
}

struct Evaluation {
    out: ControlOutput,
    dy: Vec<f64>,
    rho: f64,
    eta: Vec<f64>,
    floor_hit: bool,
}

impl Simulation {
    pub fn order(&self) -> usize {
        self.plant.order()
    }

    fn validate(&self) -> Result<(), SimError> {
        let n = self.order();
        let c = &self.controller;
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.x0.len() != n {
            return bad(format!("x0 has {} entries, plant order is {n}", self.x0.len()));
        }
        if c.gains.len() != n {
            return bad(format!("{} gains for a plant of order {n}", c.gains.len()));
        }
        if c.gains.iter().any(|k| !(*k > 0.0)) {
            return bad("gains must be positive".into());
        }
        if c.taus.len() != n.saturating_sub(1) {
            return bad(format!("need {} filter time constants, got {}", n.saturating_sub(1), c.taus.len()));
        }
        if c.cert.n() != n {
            return bad(format!("certificate is {}-dimensional, plant order is {n}", c.cert.n()));
        }
        c.spec.validate()?;
        if c.kind == ControllerKind::Bpc && !(c.nu > -1.0) {
            return bad(format!("nu = {} must exceed -1", c.nu));
        }
        if c.kind == ControllerKind::Bpc {
            c.spec.validate_rate_against(c.gains[0])?;
        }
        Ok(())
    }

    fn layout_x(&self) -> usize {
        self.order()
    }

    fn bcfb_params(&self) -> BcfbParams {
        let c = &self.controller;
        BcfbParams { gains: c.gains.clone(), sigma: c.spec.sigma, p: c.cert.p.clone(), x: c.cert.x.clone() }
    }

    fn bpc_params(&self) -> BpcParams {
        let c = &self.controller;
        BpcParams {
            gains: c.gains.clone(),
            nu: c.nu,
            spec: c.spec,
            etf: c.spec.etf(),
            p: c.cert.p.clone(),
            force_safe: c.force_safe,
        }
    }

    /// Initial bundle: plant state, filters on their commands, zero auxiliary
    /// states, `ρ(0) = ρ0`.
    fn initial_state(&self) -> Result<Vec<f64>, SimError> {
        let c = &self.controller;
        let r0 = self.reference.at(0.0);
        let etf = c.spec.etf();
        let bpc = (c.kind == ControllerKind::Bpc).then_some((&etf, c.spec.rho0));
        let filters = init_filters(c.kind, &self.plant, &self.x0, r0, &c.taus, &c.gains, c.nu, bpc)
            .map_err(|source| SimError::Control { t: 0.0, source })?;
        let n = self.order();
        let mut y = self.x0.clone();
        y.extend(filters.iter().map(|f| f.state));
        match c.kind {
            ControllerKind::Bpc => {
                y.push(c.spec.rho0);
                y.extend(std::iter::repeat_n(0.0, n - 1));
            }
            _ => y.extend(std::iter::repeat_n(0.0, n)),
        }
        Ok(y)
    }

    fn unpack(&self, y: &[f64]) -> Result<CtlState, ControlError> {
        let n = self.order();
        let c = &self.controller;
        let filters: Vec<CommandFilter> =
            (0..n - 1).map(|i| CommandFilter::new(c.taus[i], y[n + i])).collect::<Result<_, _>>()?;
        let off = 2 * n - 1;
        Ok(match c.kind {
            ControllerKind::Bpc => CtlState::Perf(BpcState { filters, rho: y[off], eta: y[off + 1..off + n].to_vec() }),
            _ => CtlState::Tracking(BcfbState { filters, eta: y[off..off + n].to_vec() }),
        })
    }

    fn evaluate(&self, t: f64, y: &[f64], bcfb: &BcfbParams, bpc: &BpcParams) -> Result<Evaluation, ControlError> {
        let n = self.order();
        let x = &y[..self.layout_x()];
        let r = self.reference.at(t);
        let c = &self.controller;
        let omega = self.disturbance.evaluate(t, x);
        let (out, rho, eta, tail, floor_hit) = match self.unpack(y)? {
            CtlState::Tracking(st) => {
                let rho = ppf(&c.spec, t);
                let out = match c.kind {
                    ControllerKind::Cfb => cfb_control(&self.plant, x, r, &st, bcfb, rho)?,
                    _ => bcfb_control(&self.plant, x, r, &st, bcfb, rho)?,
                };
                let deta = match c.kind {
                    ControllerKind::Cfb => cfb_aux_derivative(&st.eta, &c.gains, &out.g, &out.x_e, out.delta_u),
                    _ => bcfb_aux_derivative(&st.eta, out.f_p, &c.gains, &out.g, &out.x_e, out.delta_u),
                };
                (out, rho, st.eta, deta, false)
            }
            CtlState::Perf(st) => {
                let out = bpc_control(&self.plant, x, r, &st, bpc)?;
                let rate =
                    bpc_aux_derivative(&st, out.f_p, out.f_t, out.e, &c.gains, &out.g, &out.x_e, out.delta_u, &c.spec);
                let mut tail = vec![rate.rho_dot];
                tail.extend(rate.eta_dot);
                let mut eta = vec![0.0];
                eta.extend(&st.eta);
                (out, st.rho, eta, tail, rate.floor_hit)
            }
        };
        let mut dy = self.plant.derivative(x, out.u_raw, &omega)?;
        dy.extend(&out.xc_dot);
        dy.extend(tail);
        debug_assert_eq!(dy.len(), y.len());
        let _ = n;
        Ok(Evaluation { out, dy, rho, eta, floor_hit })
    }

    /// Checks the start-up conditions. Returns `(level ratio, envelope ratio)`.
    fn preconditions(&self, first: &Evaluation, force: bool) -> Result<(f64, f64), SimError> {
        let c = &self.controller;
        let spec = &c.spec;
        let e0 = first.out.e;
        let (level, env, band_ok) = match c.kind {
            ControllerKind::Bpc => {
                let r = e0 / spec.rho0;
                let ok = r > -spec.delta_underbar && r < spec.delta_bar;
                let env = if r >= 0.0 { r / spec.delta_bar } else { -r / spec.delta_underbar };
                (first.out.lyap, env, ok)
            }
            _ => {
                let env = first.out.z[0].abs() / first.rho;
                (first.out.lyap / first.out.level, env, env < 1.0)
            }
        };
        let mut problems = Vec::new();
        if !band_ok {
            problems.push(format!("initial error {e0} lies outside the performance band"));
        }
        if c.kind != ControllerKind::Cfb && level > 1.0 {
            problems.push(format!("initial error is outside the invariant set (level ratio {level:.4})"));
        }
        if !problems.is_empty() {
            let msg = problems.join("; ");
            if !force {
                return Err(SimError::PreconditionViolated(msg));
            }
            log::warn!("{msg}; continuing because the run is forced");
        }
        Ok((level, env))
    }

    /// Integrates the closed loop over `[0, horizon]`.
    pub fn run(&self, cfg: &SimConfig, opts: RunOptions) -> Result<(SimulationTrace, EventLog), SimError> {
        cfg.validate()?;
        self.validate()?;
        let c = &self.controller;
        let certified = c.cert.feasible;
        if !certified && c.kind != ControllerKind::Cfb {
            if !opts.force {
                return Err(SimError::CertificateInfeasible);
            }
            log::warn!("running with an infeasible certificate; the safety evaluation is unsound");
        }
        let sim = if cfg.seed != 0 {
            Simulation { disturbance: disturbance_variant(&self.disturbance, cfg.seed), ..self.clone() }
        } else {
            self.clone()
        };
        sim.integrate(cfg, opts, certified)
    }

    fn integrate(
        &self,
        cfg: &SimConfig,
        opts: RunOptions,
        certified: bool,
    ) -> Result<(SimulationTrace, EventLog), SimError> {
        let n = self.order();
        let c = &self.controller;
        let bcfb = self.bcfb_params();
        let bpc = self.bpc_params();
        let spec = c.spec;
        let steps = cfg.steps();
        let h = cfg.h;
        let mut y = self.initial_state()?;
        let eval =
            |t: f64, y: &[f64]| self.evaluate(t, y, &bcfb, &bpc).map_err(|source| SimError::Control { t, source });

        let mut rows = Vec::with_capacity(steps / cfg.record_every + 2);
        let mut log = EventLog::default();
        let mut sum = SimSummary { certified, ..Default::default() };
        let mut prev: Option<(bool, Region, bool, bool)> = None;
        let floor = 0.5 * spec.rho_inf;
        let rho_idx = 2 * n - 1;

        for k in 0..=steps {
            let t = k as f64 * h;
            let ev = eval(t, &y)?;
            if k == 0 {
                let (l, e) = self.preconditions(&ev, opts.force)?;
                sum.initial_level_ratio = l;
                sum.initial_envelope_ratio = e;
            }
            self.account(&ev, t, &mut sum);
            let saturated = ev.out.delta_u != 0.0;
            let state = (saturated, ev.out.region, ev.out.etf_clamped, ev.floor_hit);
            emit_events(&mut log, t, prev, state);
            prev = Some(state);
            if k % cfg.record_every == 0 || k == steps {
                rows.push(self.row(t, &y, &ev));
            }
            if k == steps {
                break;
            }
            let step = |tt: f64, yy: &[f64]| -> Result<Vec<f64>, SimError> {
                if tt == t && yy.as_ptr() == y.as_ptr() {
                    return Ok(ev.dy.clone());
                }
                eval(tt, yy).map(|e| e.dy)
            };
            let mut next = match cfg.integrator {
                Integrator::Rk4 => rk4_step(step, t, &y, h)?,
                Integrator::Euler => euler_step(step, t, &y, h)?,
            };
            if next.iter().any(|v| !v.is_finite()) {
                return Err(SimError::NonFinite { t: t + h });
            }
            if c.kind == ControllerKind::Bpc && next[rho_idx] < floor {
                next[rho_idx] = floor;
            }
            y = next;
        }
        sum.steps = steps + 1;
        Ok((SimulationTrace { kind: c.kind, n, config: *cfg, rows, summary: sum }, log))
    }

    fn account(&self, ev: &Evaluation, t: f64, sum: &mut SimSummary) {
        let spec = &self.controller.spec;
        let out = &ev.out;
        sum.max_abs_s1 = sum.max_abs_s1.max(out.s[0].abs());
        sum.max_abs_e = sum.max_abs_e.max(out.e.abs());
        if out.delta_u != 0.0 {
            sum.saturated_steps += 1;
        }
        let (level, env) = match self.controller.kind {
            ControllerKind::Bpc => {
                let r = out.e / ev.rho;
                let env = if r >= 0.0 { r / spec.delta_bar } else { -r / spec.delta_underbar };
                (out.lyap, env)
            }
            _ => (out.lyap / out.level, out.z[0].abs() / ev.rho),
        };
        sum.max_level_ratio = sum.max_level_ratio.max(level);
        sum.max_envelope_ratio = sum.max_envelope_ratio.max(env);
        if env > 1.0 + VIOLATION_TOL {
            sum.violations += 1;
            sum.first_violation.get_or_insert(t);
        }
        if level > 1.0 + VIOLATION_TOL {
            sum.level_exits += 1;
        }
    }

    fn row(&self, t: f64, y: &[f64], ev: &Evaluation) -> TraceRow {
        let out = &ev.out;
        let r = self.reference.at(t);
        TraceRow {
            t,
            x: y[..self.order()].to_vec(),
            s: out.s.clone(),
            z: out.z.clone(),
            eta: ev.eta.clone(),
            rho: ev.rho,
            gamma: out.level,
            lyap: out.lyap,
            f_p: out.f_p,
            f_t: out.f_t,
            u_raw: out.u_raw,
            u_applied: out.u_applied,
            delta_u: out.delta_u,
            region: out.region,
            x_e: out.x_e.clone(),
            y_ref: r.y,
            e: out.e,
            mu: out.mu,
        }
    }
}

fn emit_events(log: &mut EventLog, t: f64, prev: Option<(bool, Region, bool, bool)>, cur: (bool, Region, bool, bool)) {
    let (sat, region, clamp, floor) = cur;
    let (psat, pregion, pclamp, pfloor) = prev.unwrap_or((false, Region::Transition, false, false));
    if sat != psat {
        log.push(t, if sat { EventKind::SaturationOn } else { EventKind::SaturationOff });
    }
    if region != pregion {
        match pregion {
            Region::Safe => log.push(t, EventKind::ExitSafe),
            Region::Outside => log.push(t, EventKind::EnterOmega),
            Region::DeadZone => log.push(t, EventKind::ExitDeadZone),
            Region::Transition => {}
        }
        match region {
            Region::Safe => log.push(t, EventKind::EnterSafe),
            Region::Outside => log.push(t, EventKind::ExitOmega),
            Region::DeadZone => log.push(t, EventKind::EnterDeadZone),
            Region::Transition => {}
        }
    }
    if clamp && !pclamp {
        log.push(t, EventKind::EtfClamp);
    }
    if floor && !pfloor {
        log.push(t, EventKind::RhoFloor);
    }
}

impl SimulationTrace {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(|r| r.t)
    }

    pub fn header(&self) -> Vec<String> {
        let n = self.n;
        let mut h = vec!["t".to_string()];
        for p in ["x", "s", "z", "eta"] {
            h.extend((1..=n).map(|i| format!("{p}{i}")));
        }
        for c in ["rho", "gamma", "lyap", "f_p", "f_t", "u_raw", "u_applied", "delta_u", "region"] {
            h.push(c.into());
        }
        h.extend((2..=n).map(|i| format!("xe{i}")));
        h.push("y_ref".into());
        h.push("e".into());
        h
    }

    /// CSV with a header row; numbers carry 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        let num = |out: &mut String, v: f64| {
            let _ = write!(out, "{v:.8e},");
        };
        for r in &self.rows {
            num(&mut out, r.t);
            for v in r.x.iter().chain(&r.s).chain(&r.z).chain(&r.eta) {
                num(&mut out, *v);
            }
            for v in [r.rho, r.gamma, r.lyap, r.f_p, r.f_t, r.u_raw, r.u_applied, r.delta_u] {
                num(&mut out, v);
            }
            out.push_str(r.region.as_str());
            out.push(',');
            for v in r.x_e.iter().chain([&r.y_ref, &r.e]) {
                num(&mut out, *v);
            }
            out.pop();
            out.push('\n');
        }
        out
    }
}

/// Parsed CSV trace: column names and numeric rows (region as a label).
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTrace {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub regions: Vec<Region>,
}

impl CsvTrace {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.header.iter().position(|h| h == name)?;
        let region_idx = self.header.iter().position(|h| h == "region")?;
        if idx == region_idx {
            return None;
        }
        let j = if idx > region_idx { idx - 1 } else { idx };
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Plant order inferred from the `x*` columns.
    pub fn order(&self) -> usize {
        self.header.iter().filter(|h| h.starts_with('x') && h[1..].parse::<usize>().is_ok()).count()
    }
}

/// Parses and validates a trace CSV.
pub fn parse_csv(text: &str) -> Result<CsvTrace, SimError> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| SimError::MalformedTrace("empty file".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    for need in ["t", "x1", "s1", "z1", "rho", "gamma", "lyap", "f_p", "u_applied", "region"] {
        if !header.iter().any(|h| h == need) {
            return Err(SimError::MalformedTrace(format!("missing column {need:?}")));
        }
    }
    let region_idx = header.iter().position(|h| h == "region").expect("checked");
    let mut rows = Vec::new();
    let mut regions = Vec::new();
    for (no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(SimError::MalformedTrace(format!(
                "row {} has {} fields, header has {}",
                no + 2,
                fields.len(),
                header.len()
            )));
        }
        let mut row = Vec::with_capacity(fields.len() - 1);
        for (j, f) in fields.iter().enumerate() {
            if j == region_idx {
                regions.push(
                    Region::parse(f.trim())
                        .ok_or_else(|| SimError::MalformedTrace(format!("row {}: bad region {f:?}", no + 2)))?,
                );
            } else {
                row.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| SimError::MalformedTrace(format!("row {}: {:?} is not a number", no + 2, f)))?,
                );
            }
        }
        rows.push(row);
    }
    Ok(CsvTrace { header, rows, regions })
}

/// Metrics of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub label: String,
    pub rmse_s1: f64,
    pub rmse_e: f64,
    pub max_abs_s1: f64,
    pub max_abs_s1_minus_z1: f64,
    pub max_abs_eta1: f64,
    pub saturation_duty: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub a: RunMetrics,
    pub b: RunMetrics,
    /// RMSE between the two runs, per signal.
    pub cross_rmse: Vec<(String, f64)>,
}

fn rmse(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut k) = (0.0, 0usize);
    for x in v {
        s += x * x;
        k += 1;
    }
    if k == 0 {
        0.0
    } else {
        (s / k as f64).sqrt()
    }
}

fn metrics(label: &str, tr: &SimulationTrace) -> RunMetrics {
    let rows = &tr.rows;
    RunMetrics {
        label: label.to_string(),
        rmse_s1: rmse(rows.iter().map(|r| r.s[0])),
        rmse_e: rmse(rows.iter().map(|r| r.e)),
        max_abs_s1: rows.iter().map(|r| r.s[0].abs()).fold(0.0, f64::max),
        max_abs_s1_minus_z1: rows.iter().map(|r| (r.s[0] - r.z[0]).abs()).fold(0.0, f64::max),
        max_abs_eta1: rows.iter().map(|r| r.eta[0].abs()).fold(0.0, f64::max),
        saturation_duty: tr.summary.saturation_duty(),
        violations: tr.summary.violations,
    }
}

/// Compares two runs recorded on the same time grid.
pub fn compare_runs(
    a: &SimulationTrace,
    b: &SimulationTrace,
    labels: (&str, &str),
) -> Result<ComparisonReport, SimError> {
    if a.n != b.n {
        return Err(SimError::GridMismatch(format!("plant orders differ ({} vs {})", a.n, b.n)));
    }
    if a.rows.len() != b.rows.len() {
        return Err(SimError::GridMismatch(format!("{} vs {} samples", a.rows.len(), b.rows.len())));
    }
    if let Some((ra, rb)) = a.rows.iter().zip(&b.rows).find(|(ra, rb)| (ra.t - rb.t).abs() > 1e-12) {
        return Err(SimError::GridMismatch(format!("t = {} vs t = {}", ra.t, rb.t)));
    }
    let pairs = || a.rows.iter().zip(&b.rows);
    let mut cross = vec![
        ("x1".to_string(), rmse(pairs().map(|(p, q)| p.x[0] - q.x[0]))),
        ("s1".to_string(), rmse(pairs().map(|(p, q)| p.s[0] - q.s[0]))),
        ("z1".to_string(), rmse(pairs().map(|(p, q)| p.z[0] - q.z[0]))),
        ("eta1".to_string(), rmse(pairs().map(|(p, q)| p.eta[0] - q.eta[0]))),
        ("u_applied".to_string(), rmse(pairs().map(|(p, q)| p.u_applied - q.u_applied))),
    ];
    cross.push(("lyap".to_string(), rmse(pairs().map(|(p, q)| p.lyap - q.lyap))));
    Ok(ComparisonReport { a: metrics(labels.0, a), b: metrics(labels.1, b), cross_rmse: cross })
}

impl ComparisonReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:>14} {:>14} {:>14}", "metric", self.a.label, self.b.label, "delta");
        let mut line = |name: &str, a: f64, b: f64| {
            let _ = writeln!(out, "{name:<22} {a:>14.6e} {b:>14.6e} {:>14.6e}", b - a);
        };
        line("rmse(s1)", self.a.rmse_s1, self.b.rmse_s1);
        line("rmse(e)", self.a.rmse_e, self.b.rmse_e);
        line("max|s1|", self.a.max_abs_s1, self.b.max_abs_s1);
        line("max|s1-z1|", self.a.max_abs_s1_minus_z1, self.b.max_abs_s1_minus_z1);
        line("max|eta1|", self.a.max_abs_eta1, self.b.max_abs_eta1);
        line("saturation duty", self.a.saturation_duty, self.b.saturation_duty);
        line("violations", self.a.violations as f64, self.b.violations as f64);
        let _ = writeln!(out, "\n{:<22} {:>14}", "signal", "rmse(a-b)");
        for (name, v) in &self.cross_rmse {
            let _ = writeln!(out, "{name:<22} {v:>14.6e}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,a,b,delta\n");
        let mut line = |name: &str, a: f64, b: f64| {
            let _ = writeln!(out, "{name},{a:.8e},{b:.8e},{:.8e}", b - a);
        };
        line("rmse_s1", self.a.rmse_s1, self.b.rmse_s1);
        line("rmse_e", self.a.rmse_e, self.b.rmse_e);
        line("max_abs_s1", self.a.max_abs_s1, self.b.max_abs_s1);
        line("max_abs_s1_minus_z1", self.a.max_abs_s1_minus_z1, self.b.max_abs_s1_minus_z1);
        line("max_abs_eta1", self.a.max_abs_eta1, self.b.max_abs_eta1);
        line("saturation_duty", self.a.saturation_duty, self.b.saturation_duty);
        line("violations", self.a.violations as f64, self.b.violations as f64);
        for (name, v) in &self.cross_rmse {
            let _ = writeln!(out, "cross_rmse_{name},{v:.8e},{v:.8e},0");
        }
        out
    }
}
