//! Invariant-set certificates for the compensated error dynamics
//! `ż = (A0 + A_g(x̄)) z + ω`.
//!
//! A certificate is a symmetric `X = P⁻¹` plus the multipliers `(α, ε)` for
//! which the decay inequality and the coupling inequality hold. Two forms of
//! the decay inequality are supported:
//!
//! * [`LmiForm::Eq5`]: `A0 X + X A0ᵀ + (ε + α + 2κ) X + α W ⪯ 0`
//! * [`LmiForm::HMatrix`]: `[[P A0 + A0ᵀ P + (ε + α + 2κ) P, P], [P, -α W]] ⪯ 0`
//!
//! The second one is the block form whose negativity makes
//! `V̇ + 2κV ≤ α (ωᵀWω - V)`; only it guarantees invariance under
//! `ωᵀWω ≤ 1 ≤ Γ∞`. The coupling inequality `A_g X + X A_gᵀ - ε X ⪯ 0` is
//! the same in both.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    build_a0, build_ag, build_dmu, is_positive_definite, max_eigenvalue, quadratic_form, LinalgError, SquareMatrix,
};
use crate::plant::GainBounds;
use crate::sim::rk4_step;

pub const CERT_VERSION: u32 = 1;

/// Fixed search grids for the trivial `X = V_h I` solution.
const VH_GRID_POINTS: usize = 61;
const VH_MIN: f64 = 1e-3;
const VH_MAX: f64 = 1e3;
const EPS_GRID: [f64; 3] = [0.01, 0.1, 0.5];
const BISECTION_STEPS: usize = 60;

/// Monte Carlo pass threshold on `V/Γ` and `|z1|/ρ`.
pub const MC_TOLERANCE: f64 = 1e-3;

fn alpha_grid() -> impl Iterator<Item = f64> {
    (1..=20).map(|i| i as f64 * 0.1)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InvariantError {
    #[error("{0} must be symmetric positive definite")]
    NonPd(&'static str),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("certificate is not feasible")]
    CertificateInfeasible,
    #[error("invalid certificate file: {0}")]
    Parse(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LmiForm {
    #[default]
    #[serde(rename = "eq5")]
    Eq5,
    #[serde(rename = "h-matrix")]
    HMatrix,
}

impl fmt::Display for LmiForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LmiForm::Eq5 => "eq5",
            LmiForm::HMatrix => "h-matrix",
        })
    }
}

impl FromStr for LmiForm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "eq5" => Ok(LmiForm::Eq5),
            "h-matrix" => Ok(LmiForm::HMatrix),
            other => Err(format!("unknown LMI form {other:?} (expected eq5 or h-matrix)")),
        }
    }
}

/// Largest eigenvalues of the two inequalities (`≤ 0` means satisfied).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmiSlacks {
    pub decay: f64,
    pub coupling: f64,
}

impl LmiSlacks {
    pub fn worst(&self) -> f64 {
        self.decay.max(self.coupling)
    }
}

fn require_pd(m: &SquareMatrix, what: &'static str) -> Result<(), InvariantError> {
    if !is_positive_definite(m)? {
        return Err(InvariantError::NonPd(what));
    }
    Ok(())
}

/// Max eigenvalue of the decay inequality for the chosen form.
pub fn decay_slack(
    a0: &SquareMatrix,
    x: &SquareMatrix,
    w: &SquareMatrix,
    alpha: f64,
    eps: f64,
    kappa: f64,
    form: LmiForm,
) -> Result<f64, InvariantError> {
    let c = eps + alpha + 2.0 * kappa;
    match form {
        LmiForm::Eq5 => {
            let m = &(&(&(a0 * x) + &(x * &a0.transpose())) + &x.scale(c)) + &w.scale(alpha);
            Ok(max_eigenvalue(&m.symmetrized())?)
        }
        LmiForm::HMatrix => {
            let n = x.dim();
            let p = x.inverse()?.symmetrized();
            let q = &(&(&p * a0) + &(&a0.transpose() * &p)) + &p.scale(c);
            let mut h = SquareMatrix::zeros(2 * n);
            for i in 0..n {
                for j in 0..n {
                    h[(i, j)] = q[(i, j)];
                    h[(i, n + j)] = p[(i, j)];
                    h[(n + i, j)] = p[(i, j)];
                    h[(n + i, n + j)] = -alpha * w[(i, j)];
                }
            }
            Ok(max_eigenvalue(&h.symmetrized())?)
        }
    }
}

/// Max eigenvalue of `A_g X + X A_gᵀ - ε X` over all samples.
pub fn coupling_slack(ag_samples: &[SquareMatrix], x: &SquareMatrix, eps: f64) -> Result<f64, InvariantError> {
    let mut worst = f64::NEG_INFINITY;
    for ag in ag_samples {
        let m = &(&(ag * x) + &(x * &ag.transpose())) - &x.scale(eps);
        worst = worst.max(max_eigenvalue(&m.symmetrized())?);
    }
    if ag_samples.is_empty() {
        worst = max_eigenvalue(&x.scale(-eps))?;
    }
    Ok(worst)
}

/// Checks both inequalities. Feasible iff both largest eigenvalues are `≤ tol`.
#[allow(clippy::too_many_arguments)]
pub fn check_lmi_prop1(
    a0: &SquareMatrix,
    ag_samples: &[SquareMatrix],
    x: &SquareMatrix,
    w: &SquareMatrix,
    alpha: f64,
    eps: f64,
    kappa: f64,
    tol: f64,
    form: LmiForm,
) -> Result<(bool, LmiSlacks), InvariantError> {
    require_pd(x, "X")?;
    require_pd(w, "W")?;
    let slacks = LmiSlacks {
        decay: decay_slack(a0, x, w, alpha, eps, kappa, form)?,
        coupling: coupling_slack(ag_samples, x, eps)?,
    };
    Ok((slacks.decay <= tol && slacks.coupling <= tol, slacks))
}

/// `A_g` at every corner of the box `g_i ∈ [g_min, g_max]`, `i < n`.
pub fn corner_samples(g_bounds: &[GainBounds]) -> Result<Vec<SquareMatrix>, InvariantError> {
    let m = g_bounds.len().saturating_sub(1);
    let mut out = Vec::with_capacity(1 << m);
    for mask in 0..(1usize << m) {
        let g: Vec<f64> =
            (0..m).map(|i| if mask & (1 << i) == 0 { g_bounds[i].g_min } else { g_bounds[i].g_max }).collect();
        out.push(build_ag(&g)?);
    }
    Ok(out)
}

/// What the certificate was built for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CertMode {
    /// Tracking controller: `Ω = {V ≤ Γ(t)}`.
    Prop1,
    /// Performance controller: `Ω = {Φ ≤ 1}` with `μ` sampled over a range.
    Prop2 { nu: f64, mu_lo: f64, mu_hi: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantCertificate {
    pub mode: CertMode,
    pub form: LmiForm,
    pub gains: Vec<f64>,
    pub x: SquareMatrix,
    pub p: SquareMatrix,
    pub w: SquareMatrix,
    pub alpha: f64,
    pub eps_lmi: f64,
    pub kappa: f64,
    pub rho0: f64,
    pub rho_inf: f64,
    pub v_h: Option<f64>,
    pub feasible: bool,
    /// `ρ∞² / (C X Cᵀ)`.
    pub gamma_inf: f64,
    /// Largest eigenvalue of the decay inequality at the chosen point.
    pub slack: f64,
    pub decay_slack: f64,
    pub coupling_slack: f64,
    /// Best decay slack at `X = I` over the multiplier grid.
    pub witness_slack: Option<f64>,
    /// `1 ≤ Γ∞`, i.e. every `ωᵀWω ≤ 1` is admissible.
    pub disturbance_ok: bool,
}

impl InvariantCertificate {
    pub fn n(&self) -> usize {
        self.x.dim()
    }

    /// A certificate for `X = v_h I` with the given multipliers. Used when a
    /// run is forced without a searched certificate.
    pub fn unchecked_scaled_identity(n: usize, v_h: f64, rho0: f64, rho_inf: f64) -> Self {
        let x = SquareMatrix::scaled_identity(n, v_h);
        Self {
            mode: CertMode::Prop1,
            form: LmiForm::Eq5,
            gains: vec![1.0; n],
            p: SquareMatrix::scaled_identity(n, 1.0 / v_h),
            w: SquareMatrix::identity(n),
            alpha: 0.0,
            eps_lmi: 0.0,
            kappa: 0.0,
            rho0,
            rho_inf,
            v_h: Some(v_h),
            feasible: false,
            gamma_inf: rho_inf * rho_inf / v_h,
            slack: f64::NAN,
            decay_slack: f64::NAN,
            coupling_slack: f64::NAN,
            witness_slack: None,
            disturbance_ok: false,
            x,
        }
    }

    /// `‖P X - I‖_max`.
    pub fn inverse_residual(&self) -> f64 {
        (&(&self.p * &self.x) - &SquareMatrix::identity(self.n())).max_abs()
    }

    pub fn to_text(&self) -> String {
        let file = CertificateFile::from(self);
        toml::to_string(&file).expect("certificate serializes")
    }

    pub fn from_text(s: &str) -> Result<Self, InvariantError> {
        let file: CertificateFile = toml::from_str(s).map_err(|e| InvariantError::Parse(e.to_string()))?;
        file.try_into()
    }

    /// Human-readable summary for the CLI.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let verdict = if self.feasible { "feasible" } else { "INFEASIBLE" };
        out += &format!("certificate      : {verdict}\n");
        out += &format!("form             : {}\n", self.form);
        match self.mode {
            CertMode::Prop1 => out += "mode             : prop1 (V <= Gamma(t))\n",
            CertMode::Prop2 { nu, mu_lo, mu_hi } => {
                out += &format!("mode             : prop2 (Phi <= 1), nu = {nu}, mu in [{mu_lo}, {mu_hi}]\n")
            }
        }
        out += &format!("gains            : {:?}\n", self.gains);
        out += &format!("kappa            : {}\n", self.kappa);
        if let Some(v) = self.v_h {
            out += &format!("V_h              : {v:.9e}\n");
        }
        out += &format!("alpha, eps       : {}, {}\n", self.alpha, self.eps_lmi);
        out += &format!("W diag           : {:?}\n", self.w.diag());
        out += &format!("decay slack      : {:.9e}\n", self.decay_slack);
        out += &format!("coupling slack   : {:.9e}\n", self.coupling_slack);
        if let Some(ws) = self.witness_slack {
            out += &format!("witness slack X=I: {ws:.9e}\n");
        }
        out += &format!("Gamma_inf        : {:.9e}\n", self.gamma_inf);
        out += &format!(
            "w'Ww <= 1 <= Gamma_inf : {}\n",
            if self.disturbance_ok { "holds" } else { "fails (Gamma_inf < 1)" }
        );
        out
    }
}

/// Text form of a certificate (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CertificateFile {
    version: u32,
    mode: CertMode,
    form: LmiForm,
    gains: Vec<f64>,
    alpha: f64,
    eps_lmi: f64,
    kappa: f64,
    rho0: f64,
    rho_inf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v_h: Option<f64>,
    feasible: bool,
    gamma_inf: f64,
    slack: f64,
    decay_slack: f64,
    coupling_slack: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    witness_slack: Option<f64>,
    disturbance_ok: bool,
    x: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
}

fn rows(m: &SquareMatrix) -> Vec<Vec<f64>> {
    m.as_slice().chunks(m.dim()).map(|r| r.to_vec()).collect()
}

fn from_rows(r: &[Vec<f64>], what: &str) -> Result<SquareMatrix, InvariantError> {
    let refs: Vec<&[f64]> = r.iter().map(|v| v.as_slice()).collect();
    SquareMatrix::from_rows(&refs).map_err(|e| InvariantError::Parse(format!("{what}: {e}")))
}

impl From<&InvariantCertificate> for CertificateFile {
    fn from(c: &InvariantCertificate) -> Self {
        Self {
            version: CERT_VERSION,
            mode: c.mode,
            form: c.form,
            gains: c.gains.clone(),
            alpha: c.alpha,
            eps_lmi: c.eps_lmi,
            kappa: c.kappa,
            rho0: c.rho0,
            rho_inf: c.rho_inf,
            v_h: c.v_h,
            feasible: c.feasible,
            gamma_inf: c.gamma_inf,
            slack: c.slack,
            decay_slack: c.decay_slack,
            coupling_slack: c.coupling_slack,
            witness_slack: c.witness_slack,
            disturbance_ok: c.disturbance_ok,
            x: rows(&c.x),
            w: rows(&c.w),
        }
    }
}

impl TryFrom<CertificateFile> for InvariantCertificate {
    type Error = InvariantError;
    fn try_from(f: CertificateFile) -> Result<Self, InvariantError> {
        if f.version != CERT_VERSION {
            return Err(InvariantError::Parse(format!("unsupported certificate version {}", f.version)));
        }
        let x = from_rows(&f.x, "x")?;
        let w = from_rows(&f.w, "w")?;
        if x.dim() != w.dim() || x.dim() != f.gains.len() {
            return Err(InvariantError::Parse("x, w and gains disagree on dimension".into()));
        }
        require_pd(&x, "X")?;
        let p = x.inverse()?.symmetrized();
        Ok(Self {
            mode: f.mode,
            form: f.form,
            gains: f.gains,
            x,
            p,
            w,
            alpha: f.alpha,
            eps_lmi: f.eps_lmi,
            kappa: f.kappa,
            rho0: f.rho0,
            rho_inf: f.rho_inf,
            v_h: f.v_h,
            feasible: f.feasible,
            gamma_inf: f.gamma_inf,
            slack: f.slack,
            decay_slack: f.decay_slack,
            coupling_slack: f.coupling_slack,
            witness_slack: f.witness_slack,
            disturbance_ok: f.disturbance_ok,
        })
    }
}

/// Inputs of the trivial-solution search.
#[derive(Debug, Clone)]
pub struct SearchRequest {
    pub gains: Vec<f64>,
    pub kappa: f64,
    pub w: SquareMatrix,
    pub g_bounds: Vec<GainBounds>,
    pub rho0: f64,
    pub rho_inf: f64,
    pub form: LmiForm,
    /// Pin `V_h` instead of searching it.
    pub v_h: Option<f64>,
    pub mode: CertMode,
}

impl SearchRequest {
    pub fn prop1(gains: Vec<f64>, kappa: f64, w_scale: f64) -> Self {
        let n = gains.len();
        Self {
            gains,
            kappa,
            w: SquareMatrix::scaled_identity(n, w_scale),
            g_bounds: vec![GainBounds { g_min: 1.0, g_max: 1.0 }; n],
            rho0: 1.0,
            rho_inf: 0.1,
            form: LmiForm::Eq5,
            v_h: None,
            mode: CertMode::Prop1,
        }
    }
}

struct Evaluated {
    feasible: bool,
    slacks: LmiSlacks,
}

/// Feasible beats infeasible; among feasible points the more negative decay
/// slack wins, among infeasible ones the smaller violation.
fn better(a: &Evaluated, b: &Evaluated) -> bool {
    match (a.feasible, b.feasible) {
        (true, false) => true,
        (false, true) => false,
        (true, true) => a.slacks.decay < b.slacks.decay,
        (false, false) => a.slacks.worst() < b.slacks.worst(),
    }
}

struct Problem {
    a0_samples: Vec<SquareMatrix>,
    ag_samples: Vec<SquareMatrix>,
    w: SquareMatrix,
    kappa: f64,
    form: LmiForm,
}

impl Problem {
    fn build(req: &SearchRequest) -> Result<Self, InvariantError> {
        let a0 = build_a0(&req.gains)?;
        let corners = corner_samples(&req.g_bounds)?;
        let (a0_samples, ag_samples) = match req.mode {
            CertMode::Prop1 => (vec![a0], corners),
            CertMode::Prop2 { nu, mu_lo, mu_hi } => {
                let n = req.gains.len();
                let mus = mu_samples(mu_lo, mu_hi);
                let mut a0s = Vec::new();
                let mut ags = Vec::new();
                for &mu in &mus {
                    let dnu = build_dmu(n, mu, nu)?;
                    let d = build_dmu(n, mu, 1.0)?;
                    a0s.push(&dnu * &a0);
                    for ag in &corners {
                        ags.push(&(&d * ag) * &d);
                    }
                }
                (a0s, ags)
            }
        };
        Ok(Self { a0_samples, ag_samples, w: req.w.clone(), kappa: req.kappa, form: req.form })
    }

    fn evaluate(&self, x: &SquareMatrix, alpha: f64, eps: f64) -> Result<Evaluated, InvariantError> {
        let mut decay = f64::NEG_INFINITY;
        for a0 in &self.a0_samples {
            decay = decay.max(decay_slack(a0, x, &self.w, alpha, eps, self.kappa, self.form)?);
        }
        let coupling = coupling_slack(&self.ag_samples, x, eps)?;
        let slacks = LmiSlacks { decay, coupling };
        Ok(Evaluated { feasible: slacks.worst() <= 0.0, slacks })
    }
}

/// Geometric samples of `[mu_lo, mu_hi]`, endpoints included.
fn mu_samples(lo: f64, hi: f64) -> Vec<f64> {
    if (hi - lo).abs() <= f64::EPSILON * hi.abs().max(1.0) {
        return vec![lo];
    }
    let k = 9;
    (0..k).map(|i| lo * (hi / lo).powf(i as f64 / (k - 1) as f64)).collect()
}

fn vh_grid() -> Vec<f64> {
    (0..VH_GRID_POINTS).map(|i| VH_MIN * (VH_MAX / VH_MIN).powf(i as f64 / (VH_GRID_POINTS - 1) as f64)).collect()
}

/// Searches `X = V_h I` over fixed grids of `(V_h, α, ε)` and returns the
/// feasible point with the largest `Γ∞` (smallest `V_h`), refined by
/// bisection. With `req.v_h` set only `(α, ε)` are searched and the most
/// negative slack wins.
pub fn search_trivial_solution(req: &SearchRequest) -> Result<InvariantCertificate, InvariantError> {
    let n = req.gains.len();
    if n == 0 {
        return Err(InvariantError::Precondition("at least one gain is required".into()));
    }
    let kmin = req.gains.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(req.kappa > 0.0) {
        return Err(InvariantError::Precondition(format!("kappa = {} must be positive", req.kappa)));
    }
    if req.kappa > kmin {
        return Err(InvariantError::Precondition(format!("kappa = {} exceeds the smallest gain {}", req.kappa, kmin)));
    }
    if req.w.dim() != n || req.g_bounds.len() != n {
        return Err(InvariantError::Precondition("W and g bounds must match the number of gains".into()));
    }
    if !(req.rho0 > req.rho_inf && req.rho_inf > 0.0) {
        return Err(InvariantError::Precondition("need rho0 > rho_inf > 0".into()));
    }
    if let CertMode::Prop2 { nu, mu_lo, mu_hi } = req.mode {
        if !(nu > -1.0) {
            return Err(InvariantError::Precondition(format!("nu = {nu} must exceed -1")));
        }
        if !(mu_lo > 0.0 && mu_hi >= mu_lo) {
            return Err(InvariantError::Precondition("need 0 < mu_lo <= mu_hi".into()));
        }
    }
    require_pd(&req.w, "W")?;
    let problem = Problem::build(req)?;
    let x_of = |vh: f64| SquareMatrix::scaled_identity(n, vh);

    let best_at = |vh: f64| -> Result<(f64, f64, Evaluated), InvariantError> {
        let x = x_of(vh);
        let mut best: Option<(f64, f64, Evaluated)> = None;
        for alpha in alpha_grid() {
            for &eps in &EPS_GRID {
                let ev = problem.evaluate(&x, alpha, eps)?;
                if best.as_ref().is_none_or(|b| better(&ev, &b.2)) {
                    best = Some((alpha, eps, ev));
                }
            }
        }
        Ok(best.expect("non-empty grid"))
    };

    let witness = best_at(1.0)?.2.slacks.decay;

    let (vh, alpha, eps, ev) = if let Some(vh) = req.v_h {
        if !(vh > 0.0) {
            return Err(InvariantError::Precondition(format!("V_h = {vh} must be positive")));
        }
        let (a, e, ev) = best_at(vh)?;
        (vh, a, e, ev)
    } else {
        let grid = vh_grid();
        let mut first_feasible = None;
        for (i, &vh) in grid.iter().enumerate() {
            let (a, e, ev) = best_at(vh)?;
            if ev.feasible {
                first_feasible = Some((i, vh, a, e, ev));
                break;
            }
        }
        match first_feasible {
            None => {
                // report the least-bad point at the top of the grid
                let vh = *grid.last().expect("grid");
                let (a, e, ev) = best_at(vh)?;
                (vh, a, e, ev)
            }
            Some((0, vh, a, e, ev)) => (vh, a, e, ev),
            Some((i, vh_hi, a, e, ev)) => {
                let vh_lo = grid[i - 1];
                let mut best = (vh_hi, a, e, ev);
                for alpha in alpha_grid() {
                    for &eps in &EPS_GRID {
                        if !problem.evaluate(&x_of(vh_hi), alpha, eps)?.feasible {
                            continue;
                        }
                        let (mut lo, mut hi) = (vh_lo, vh_hi);
                        for _ in 0..BISECTION_STEPS {
                            let mid = (lo * hi).sqrt();
                            if problem.evaluate(&x_of(mid), alpha, eps)?.feasible {
                                hi = mid;
                            } else {
                                lo = mid;
                            }
                        }
                        if hi < best.0 {
                            let ev = problem.evaluate(&x_of(hi), alpha, eps)?;
                            best = (hi, alpha, eps, ev);
                        }
                    }
                }
                best
            }
        }
    };

    let x = x_of(vh);
    let gamma_inf = req.rho_inf * req.rho_inf / vh;
    Ok(InvariantCertificate {
        mode: req.mode,
        form: req.form,
        gains: req.gains.clone(),
        p: SquareMatrix::scaled_identity(n, 1.0 / vh),
        w: req.w.clone(),
        alpha,
        eps_lmi: eps,
        kappa: req.kappa,
        rho0: req.rho0,
        rho_inf: req.rho_inf,
        v_h: Some(vh),
        feasible: ev.feasible,
        gamma_inf,
        slack: ev.slacks.decay,
        decay_slack: ev.slacks.decay,
        coupling_slack: ev.slacks.coupling,
        witness_slack: Some(witness),
        disturbance_ok: gamma_inf >= 1.0,
        x,
    })
}

/// Result of [`check_lmi_prop2`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prop2Check {
    pub feasible: bool,
    pub slacks: LmiSlacks,
    /// `λ_max(D^{1-ν/2} W D^{1-ν/2})` at `μ_lo` and `μ_hi`; admissible
    /// disturbances satisfy `|ω| ≤ 1/√λ` there.
    pub disturbance_weight: (f64, f64),
}

/// Block-diagonal check for the μ-scaled system
/// `A(x̄, μ) = D_μ^ν A0 + D_μ A_g D_μ` over samples of `μ`.
#[allow(clippy::too_many_arguments)]
pub fn check_lmi_prop2(
    a0: &SquareMatrix,
    ag_samples: &[SquareMatrix],
    x1: f64,
    x_rest: &SquareMatrix,
    w: &SquareMatrix,
    alpha: f64,
    eps: f64,
    kappa: f64,
    mu_range: (f64, f64),
    nu: f64,
    tol: f64,
    form: LmiForm,
) -> Result<Prop2Check, InvariantError> {
    if !(nu > -1.0) {
        return Err(InvariantError::Precondition(format!("nu = {nu} must exceed -1")));
    }
    if !(x1 > 0.0) {
        return Err(InvariantError::NonPd("X1"));
    }
    let (mu_lo, mu_hi) = mu_range;
    if !(mu_lo > 0.0 && mu_hi >= mu_lo) {
        return Err(InvariantError::Precondition("need 0 < mu_lo <= mu_hi".into()));
    }
    let x = SquareMatrix::block_diag(&[&SquareMatrix::from_diag(&[x1]), x_rest]);
    require_pd(&x, "X")?;
    require_pd(w, "W")?;
    let n = x.dim();
    let mut decay = f64::NEG_INFINITY;
    let mut coupling = f64::NEG_INFINITY;
    for mu in mu_samples(mu_lo, mu_hi) {
        let a0mu = &build_dmu(n, mu, nu)? * a0;
        decay = decay.max(decay_slack(&a0mu, &x, w, alpha, eps, kappa, form)?);
        let d = build_dmu(n, mu, 1.0)?;
        let scaled: Vec<SquareMatrix> = ag_samples.iter().map(|ag| &(&d * ag) * &d).collect();
        coupling = coupling.max(coupling_slack(&scaled, &x, eps)?);
    }
    let weight = |mu: f64| -> Result<f64, InvariantError> {
        let d = build_dmu(n, mu, 1.0 - 0.5 * nu)?;
        Ok(max_eigenvalue(&(&(&d * w) * &d).symmetrized())?)
    };
    let slacks = LmiSlacks { decay, coupling };
    Ok(Prop2Check {
        feasible: decay <= tol && coupling <= tol,
        slacks,
        disturbance_weight: (weight(mu_lo)?, weight(mu_hi)?),
    })
}

/// Options for [`monte_carlo_invariance`].
#[derive(Debug, Clone)]
pub struct McOptions {
    pub trials: usize,
    pub horizon: f64,
    pub seed: u64,
    /// Multiplies every sampled disturbance; 1 keeps it on `ωᵀWω = 1`.
    pub omega_scale: f64,
    /// Disturbance hold time.
    pub segment: f64,
    pub step: f64,
    /// Half-width of the box the surrogate plant state `x̄` is drawn from.
    pub state_box: f64,
}

impl Default for McOptions {
    fn default() -> Self {
        Self { trials: 200, horizon: 20.0, seed: 7, omega_scale: 1.0, segment: 0.1, step: 1e-3, state_box: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McReport {
    pub trials: usize,
    pub max_v_ratio: f64,
    pub max_z1_ratio: f64,
    pub mean_v_ratio: f64,
    /// Seed that reproduces the worst trial on its own.
    pub worst_trial_seed: Option<u64>,
    pub passed: bool,
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(trial as u64 + 1)
}

fn unit_direction<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let d: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return d.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Scales a random direction onto `vᵀ M v = level`.
fn on_ellipsoid<R: Rng>(rng: &mut R, m: &SquareMatrix, level: f64) -> Vec<f64> {
    let d = unit_direction(rng, m.dim());
    let q = quadratic_form(m, &d).expect("dimensions match");
    let s = (level / q).sqrt();
    d.into_iter().map(|v| v * s).collect()
}

/// Runs one trial; returns `(max V/Γ, max |z1|/ρ)`.
fn run_trial<A, F>(
    a_builder: &A,
    cert: &InvariantCertificate,
    rho_fn: &F,
    opts: &McOptions,
    seed: u64,
) -> Result<(f64, f64), InvariantError>
where
    A: Fn(&[f64]) -> SquareMatrix + Sync,
    F: Fn(f64) -> f64 + Sync,
{
    let n = cert.n();
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let cxc = cert.x[(0, 0)];
    let gamma = |t: f64| rho_fn(t).powi(2) / cxc;
    let mut z = on_ellipsoid(&mut rng, &cert.p, gamma(0.0));
    let mut t = 0.0;
    let mut worst_v: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    let mut track = |t: f64, z: &[f64]| {
        let v = quadratic_form(&cert.p, z).expect("dims");
        worst_v = worst_v.max(v / gamma(t));
        worst_z = worst_z.max(z[0].abs() / rho_fn(t));
    };
    track(t, &z);
    let seg_steps = (opts.segment / opts.step).round().max(1.0) as usize;
    let h = opts.segment / seg_steps as f64;
    let segments = (opts.horizon / opts.segment).ceil() as usize;
    for _ in 0..segments {
        let xbar: Vec<f64> = (0..n).map(|_| rng.random_range(-opts.state_box..=opts.state_box)).collect();
        let a = a_builder(&xbar);
        let omega: Vec<f64> = on_ellipsoid(&mut rng, &cert.w, 1.0).into_iter().map(|v| v * opts.omega_scale).collect();
        for _ in 0..seg_steps {
            z = rk4_step(
                |_, z: &[f64]| {
                    let az = a.mul_vec(z)?;
                    Ok::<_, LinalgError>(az.iter().zip(&omega).map(|(a, w)| a + w).collect())
                },
                t,
                &z,
                h,
            )?;
            t += h;
            track(t, &z);
        }
    }
    Ok((worst_v, worst_z))
}

/// Integrates `ż = A(x̄) z + ω` from random points on `V(0) = Γ(0)` with
/// piecewise-constant disturbances drawn on `ωᵀWω = 1` and reports the
/// largest `V/Γ` and `|z1|/ρ` seen. Trials run in parallel.
pub fn monte_carlo_invariance<A, F>(
    a_builder: A,
    cert: &InvariantCertificate,
    rho_fn: F,
    opts: &McOptions,
) -> Result<McReport, InvariantError>
where
    A: Fn(&[f64]) -> SquareMatrix + Sync,
    F: Fn(f64) -> f64 + Sync,
{
    if !cert.feasible {
        return Err(InvariantError::CertificateInfeasible);
    }
    if opts.trials == 0 {
        log::warn!("no Monte Carlo trials requested; invariance check is vacuous");
        return Ok(McReport {
            trials: 0,
            max_v_ratio: 0.0,
            max_z1_ratio: 0.0,
            mean_v_ratio: 0.0,
            worst_trial_seed: None,
            passed: true,
        });
    }
    let results: Vec<(u64, f64, f64)> = (0..opts.trials)
        .into_par_iter()
        .map(|i| {
            let s = trial_seed(opts.seed, i);
            run_trial(&a_builder, cert, &rho_fn, opts, s).map(|(v, z)| (s, v, z))
        })
        .collect::<Result<_, _>>()?;
    let worst = results.iter().max_by(|a, b| a.1.total_cmp(&b.1)).expect("non-empty");
    let max_v = worst.1;
    let max_z = results.iter().map(|r| r.2).fold(0.0, f64::max);
    let mean_v = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
    Ok(McReport {
        trials: opts.trials,
        max_v_ratio: max_v,
        max_z1_ratio: max_z,
        mean_v_ratio: mean_v,
        worst_trial_seed: Some(worst.0),
        passed: max_v <= 1.0 + MC_TOLERANCE && max_z <= 1.0 + MC_TOLERANCE,
    })
}

/// `A(x̄) = A0 + A_g(g(x̄))` where each `g_i` is mapped from `x̄_i` into
/// `[g_min, g_max]`, so the Monte Carlo sweeps the whole coupling band.
pub fn build_mc_sampler(
    gains: &[f64],
    band: GainBounds,
    state_box: f64,
) -> Result<impl Fn(&[f64]) -> SquareMatrix + Sync, InvariantError> {
    let a0 = build_a0(gains)?;
    let m = gains.len().saturating_sub(1);
    let span = band.g_max - band.g_min;
    Ok(move |xbar: &[f64]| {
        let g: Vec<f64> =
            xbar.iter().take(m).map(|v| band.g_min + span * (0.5 + 0.5 * (v / state_box).clamp(-1.0, 1.0))).collect();
        &a0 + &build_ag(&g).expect("finite gains")
    })
}

/// Re-runs a single trial by its seed (as reported in `worst_trial_seed`).
pub fn replay_trial<A, F>(
    a_builder: A,
    cert: &InvariantCertificate,
    rho_fn: F,
    opts: &McOptions,
    trial_seed: u64,
) -> Result<(f64, f64), InvariantError>
where
    A: Fn(&[f64]) -> SquareMatrix + Sync,
    F: Fn(f64) -> f64 + Sync,
{
    run_trial(&a_builder, cert, &rho_fn, opts, trial_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit_g(n: usize) -> Vec<GainBounds> {
        vec![GainBounds { g_min: 1.0, g_max: 1.0 }; n]
    }

    #[test]
    fn trivial_x_kills_coupling_term() {
        let x = SquareMatrix::scaled_identity(3, 2.5);
        for ag in corner_samples(&[
            GainBounds { g_min: 0.5, g_max: 1.5 },
            GainBounds { g_min: 0.2, g_max: 3.0 },
            GainBounds { g_min: 1.0, g_max: 1.0 },
        ])
        .unwrap()
        {
            let m = &(&ag * &x) + &(&x * &ag.transpose());
            assert_eq!(m.max_abs(), 0.0);
        }
        assert_abs_diff_eq!(
            coupling_slack(&corner_samples(&unit_g(3)).unwrap(), &x, 0.1).unwrap(),
            -0.25,
            epsilon = 1e-12
        );
    }

    #[test]
    fn case_a_identity_witness_diagonal_arithmetic() {
        let a0 = build_a0(&[2.0, 3.0, 4.0]).unwrap();
        let ag = corner_samples(&unit_g(3)).unwrap();
        let x = SquareMatrix::identity(3);
        // stage 1: (-4 + 0.1 + 0.5 + 1) + 0.5 = -1.9
        let (ok, s) =
            check_lmi_prop1(&a0, &ag, &x, &SquareMatrix::identity(3), 0.5, 0.1, 0.5, 0.0, LmiForm::Eq5).unwrap();
        assert!(ok);
        assert_abs_diff_eq!(s.decay, -1.9, epsilon = 1e-12);
        // W = 10 I: -2.4 + 5 = 2.6
        let (ok, s) =
            check_lmi_prop1(&a0, &ag, &x, &SquareMatrix::scaled_identity(3, 10.0), 0.5, 0.1, 0.5, 0.0, LmiForm::Eq5)
                .unwrap();
        assert!(!ok);
        assert_abs_diff_eq!(s.decay, 2.6, epsilon = 1e-12);
    }

    #[test]
    fn h_matrix_form_matches_schur_complement_on_diagonal_data() {
        // diagonal data: H ⪯ 0 iff q_i + p_i² / (α w_i) ≤ 0 for each stage
        let a0 = build_a0(&[2.0, 3.0, 4.0]).unwrap();
        let vh = 0.02;
        let x = SquareMatrix::scaled_identity(3, vh);
        let (alpha, eps, kappa, wv) = (1.5, 0.01, 0.5, 50.0);
        let w = SquareMatrix::scaled_identity(3, wv);
        let p = 1.0 / vh;
        let schur: f64 = [2.0, 3.0, 4.0]
            .iter()
            .map(|k| (-2.0 * k + eps + alpha + 2.0 * kappa) * p + p * p / (alpha * wv))
            .fold(f64::NEG_INFINITY, f64::max);
        let h = decay_slack(&a0, &x, &w, alpha, eps, kappa, LmiForm::HMatrix).unwrap();
        assert_eq!(h <= 0.0, schur <= 0.0);
        assert!(h <= 0.0);
    }

    #[test]
    fn rejects_non_pd_inputs() {
        let a0 = build_a0(&[1.0, 1.0]).unwrap();
        let r = check_lmi_prop1(
            &a0,
            &[],
            &SquareMatrix::from_diag(&[1.0, -1.0]),
            &SquareMatrix::identity(2),
            0.5,
            0.1,
            0.5,
            0.0,
            LmiForm::Eq5,
        );
        assert_eq!(r, Err(InvariantError::NonPd("X")));
    }

    #[test]
    fn search_case_a_is_feasible_with_identity_witness() {
        let cert = search_trivial_solution(&SearchRequest::prop1(vec![2.0, 3.0, 4.0], 0.5, 1.0)).unwrap();
        assert!(cert.feasible);
        assert!(cert.witness_slack.unwrap() <= -1.9);
        assert!(cert.slack <= 0.0);
        assert!(cert.inverse_residual() < 1e-8);
        // smallest feasible V_h in eq5 form: (-3 + ε + α) V_h + α ≤ 0 at α = 0.1, ε = 0.01
        assert_abs_diff_eq!(cert.v_h.unwrap(), 0.1 / 2.89, epsilon = 1e-6);
    }

    #[test]
    fn search_rejects_fast_envelope() {
        let r = search_trivial_solution(&SearchRequest::prop1(vec![1.0, 1.0, 1.0], 2.0, 1.0));
        assert!(matches!(r, Err(InvariantError::Precondition(_))));
    }

    #[test]
    fn weaker_disturbance_weight_grows_feasible_region() {
        // decay slack is (c_i) V_h + α w_i; smaller w keeps more V_h feasible
        let strong = search_trivial_solution(&SearchRequest::prop1(vec![2.0, 3.0, 4.0], 0.5, 1.0)).unwrap();
        let weak = search_trivial_solution(&SearchRequest::prop1(vec![2.0, 3.0, 4.0], 0.5, 0.1)).unwrap();
        assert!(weak.v_h.unwrap() < strong.v_h.unwrap());
    }

    #[test]
    fn h_matrix_case_a_certificate_covers_disturbances() {
        let mut req = SearchRequest::prop1(vec![2.0, 3.0, 4.0], 0.5, 50.0);
        req.form = LmiForm::HMatrix;
        let cert = search_trivial_solution(&req).unwrap();
        assert!(cert.feasible);
        assert!(cert.disturbance_ok, "Gamma_inf = {}", cert.gamma_inf);
    }

    #[test]
    fn prop2_reduces_to_prop1_when_nu_is_zero() {
        let a0 = build_a0(&[1.0, 1.0, 1.0]).unwrap();
        let ag = corner_samples(&unit_g(3)).unwrap();
        let w = SquareMatrix::identity(3);
        let p2 = check_lmi_prop2(
            &a0,
            &ag,
            1.0,
            &SquareMatrix::identity(2),
            &w,
            0.4,
            0.1,
            0.5,
            (0.5, 8.0),
            0.0,
            0.0,
            LmiForm::Eq5,
        )
        .unwrap();
        let (ok1, s1) =
            check_lmi_prop1(&a0, &ag, &SquareMatrix::identity(3), &w, 0.4, 0.1, 0.5, 0.0, LmiForm::Eq5).unwrap();
        assert_eq!(p2.feasible, ok1);
        assert_abs_diff_eq!(p2.slacks.decay, s1.decay, epsilon = 1e-12);
        assert_abs_diff_eq!(p2.slacks.coupling, s1.coupling, epsilon = 1e-12);
        // (-2 + 0.1 + 0.4 + 1) + 0.4 = -0.1
        assert!(p2.feasible);
        assert_abs_diff_eq!(p2.slacks.decay, -0.1, epsilon = 1e-12);
        assert!(p2.disturbance_weight.1 >= p2.disturbance_weight.0);
    }

    #[test]
    fn certificate_text_round_trip() {
        let cert = search_trivial_solution(&SearchRequest::prop1(vec![2.0, 3.0, 4.0], 0.5, 1.0)).unwrap();
        let back = InvariantCertificate::from_text(&cert.to_text()).unwrap();
        assert_eq!(back.x, cert.x);
        assert_eq!(back.feasible, cert.feasible);
        assert_eq!(back.v_h, cert.v_h);
        assert!(back.inverse_residual() < 1e-8);
        assert!(InvariantCertificate::from_text("version = 2").is_err());
    }

    #[test]
    fn mc_zero_disturbance_decays_from_boundary() {
        let mut req = SearchRequest::prop1(vec![2.0, 3.0, 4.0], 0.5, 50.0);
        req.form = LmiForm::HMatrix;
        let cert = search_trivial_solution(&req).unwrap();
        let a = build_a0(&[2.0, 3.0, 4.0]).unwrap();
        let spec_rho = |t: f64| 0.9 * (-0.5 * t).exp() + 0.1;
        let opts = McOptions { trials: 8, horizon: 5.0, omega_scale: 0.0, ..Default::default() };
        let r = monte_carlo_invariance(|_: &[f64]| a.clone(), &cert, spec_rho, &opts).unwrap();
        assert!(r.passed);
        assert!(r.max_v_ratio <= 1.0 + 1e-12);
    }

    #[test]
    fn mc_requires_feasible_certificate_and_handles_zero_trials() {
        let mut cert = InvariantCertificate::unchecked_scaled_identity(2, 1.0, 1.0, 0.1);
        let a = SquareMatrix::scaled_identity(2, -1.0);
        let r = monte_carlo_invariance(|_: &[f64]| a.clone(), &cert, |_| 1.0, &McOptions::default());
        assert_eq!(r, Err(InvariantError::CertificateInfeasible));
        cert.feasible = true;
        let r = monte_carlo_invariance(
            |_: &[f64]| a.clone(),
            &cert,
            |_| 1.0,
            &McOptions { trials: 0, ..Default::default() },
        )
        .unwrap();
        assert!(r.passed);
        assert_eq!(r.trials, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn raising_a_gain_never_raises_decay_slack(
            gains in prop::collection::vec(0.5f64..5.0, 1..5),
            bump in 0.0f64..3.0,
            stage in 0usize..5,
            vh in 0.05f64..5.0,
        ) {
            let n = gains.len();
            let stage = stage % n;
            let x = SquareMatrix::scaled_identity(n, vh);
            let w = SquareMatrix::identity(n);
            for form in [LmiForm::Eq5, LmiForm::HMatrix] {
                let a = decay_slack(&build_a0(&gains).unwrap(), &x, &w, 0.5, 0.1, 0.25, form).unwrap();
                let mut g2 = gains.clone();
                g2[stage] += bump;
                let b = decay_slack(&build_a0(&g2).unwrap(), &x, &w, 0.5, 0.1, 0.25, form).unwrap();
                prop_assert!(b <= a + 1e-9);
            }
        }

        #[test]
        fn certificates_invert_exactly(w_scale in 0.1f64..100.0, kappa in 0.05f64..1.0) {
            let mut req = SearchRequest::prop1(vec![1.5, 2.0, 2.5], kappa, w_scale);
            req.form = LmiForm::HMatrix;
            let cert = search_trivial_solution(&req).unwrap();
            prop_assert!(cert.inverse_residual() < 1e-8);
        }
    }

    /// Soundness spot-check: every h-matrix certificate that also satisfies
    /// `1 ≤ Γ∞` survives the Monte Carlo certifier.
    #[test]
    fn h_matrix_certificates_are_sound_on_small_systems() {
        for (gains, kappa, w_scale) in
            [(vec![2.0, 3.0], 0.5, 80.0), (vec![1.0, 1.0, 1.0], 0.3, 400.0), (vec![3.0], 1.0, 40.0)]
        {
            let mut req = SearchRequest::prop1(gains.clone(), kappa, w_scale);
            req.form = LmiForm::HMatrix;
            req.g_bounds = vec![GainBounds { g_min: 0.5, g_max: 1.5 }; gains.len()];
            let cert = search_trivial_solution(&req).unwrap();
            assert!(cert.feasible && cert.disturbance_ok, "{}", cert.report());
            let gb = req.g_bounds.clone();
            let a0 = build_a0(&gains).unwrap();
            let builder = move |xbar: &[f64]| {
                // g drawn inside its band from the surrogate state
                let g: Vec<f64> = gb
                    .iter()
                    .take(gb.len() - 1)
                    .zip(xbar)
                    .map(|(b, v)| b.g_min + (b.g_max - b.g_min) * (0.5 + 0.25 * v.clamp(-2.0, 2.0)))
                    .collect();
                &a0 + &build_ag(&g).unwrap()
            };
            let rho = move |t: f64| 0.9 * (-kappa * t).exp() + 0.1;
            let opts = McOptions { trials: 16, horizon: 10.0, seed: 3, ..Default::default() };
            let r = monte_carlo_invariance(builder, &cert, rho, &opts).unwrap();
            assert!(r.passed, "gains {gains:?}: max V/Γ = {}", r.max_v_ratio);
        }
    }
}
