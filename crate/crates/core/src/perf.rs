//! Performance-constraint geometry.
//!
//! Covers the exponential performance envelope, the error transform used by
//! the performance controller, the two safety-evaluation ramps and the
//! dead-zone transition, plus the invariant-set level functions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{build_dmu, quadratic_form, LinalgError, SquareMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerfError {
    #[error("invalid performance parameter: {0}")]
    InvalidSpec(String),
    #[error("safety level must lie strictly below the invariant level (inner {inner}, outer {outer})")]
    InvalidLevels { inner: f64, outer: f64 },
    #[error("e/rho = {0} lies outside the transform band")]
    OutOfBand(f64),
    #[error("C X Cᵀ = {0} must be positive")]
    DegenerateX(f64),
    #[error("level matrix is not positive definite")]
    NonPd,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Constraint geometry shared by both controllers. Fields that only one
/// controller reads are still validated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerformanceSpec {
    pub rho0: f64,
    pub rho_inf: f64,
    /// Envelope decay rate (tracking controller).
    #[serde(default = "default_rate")]
    pub kappa: f64,
    /// Envelope convergence rate (performance controller).
    #[serde(default = "default_rate")]
    pub k_rho: f64,
    #[serde(default = "one")]
    pub delta_bar: f64,
    #[serde(default = "one")]
    pub delta_underbar: f64,
    /// Safety fraction of the invariant level.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Safety level of Φ.
    #[serde(default = "default_phi0")]
    pub phi0: f64,
    /// Dead-zone width as a fraction of ρ.
    #[serde(default = "default_epsilon_dz")]
    pub epsilon_dz: f64,
}

fn default_rate() -> f64 {
    0.5
}
fn one() -> f64 {
    1.0
}
fn default_sigma() -> f64 {
    0.9
}
fn default_phi0() -> f64 {
    0.7
}
pub(crate) fn default_epsilon_dz() -> f64 {
    0.05
}

impl PerformanceSpec {
    /// Envelope endpoints with every other field at its default.
    pub fn new(rho0: f64, rho_inf: f64) -> Self {
        Self {
            rho0,
            rho_inf,
            kappa: default_rate(),
            k_rho: default_rate(),
            delta_bar: one(),
            delta_underbar: one(),
            sigma: default_sigma(),
            phi0: default_phi0(),
            epsilon_dz: default_epsilon_dz(),
        }
    }

    pub fn validate(&self) -> Result<(), PerfError> {
        let bad = |m: &str| Err(PerfError::InvalidSpec(m.to_string()));
        let all = [
            self.rho0,
            self.rho_inf,
            self.kappa,
            self.k_rho,
            self.delta_bar,
            self.delta_underbar,
            self.sigma,
            self.phi0,
            self.epsilon_dz,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("all performance parameters must be finite");
        }
        if !(self.rho_inf > 0.0 && self.rho0 > self.rho_inf) {
            return bad("need rho0 > rho_inf > 0");
        }
        if !(self.kappa > 0.0) {
            return bad("kappa must be positive");
        }
        if !(self.k_rho > 0.0) {
            return bad("k_rho must be positive");
        }
        if !(self.delta_bar > 0.0 && self.delta_underbar > 0.0) {
            return bad("delta_bar and delta_underbar must be positive");
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return bad("sigma must lie in (0, 1)");
        }
        if !(self.phi0 > 0.0 && self.phi0 < 1.0) {
            return bad("phi0 must lie in (0, 1)");
        }
        if !(self.epsilon_dz > 0.0) {
            return bad("epsilon_dz must be positive");
        }
        Ok(())
    }

    /// Envelope rate must not exceed the first-stage gain.
    pub fn validate_rate_against(&self, k1: f64) -> Result<(), PerfError> {
        if self.kappa > k1 {
            return Err(PerfError::InvalidSpec(format!("kappa = {} exceeds k1 = {}", self.kappa, k1)));
        }
        Ok(())
    }

    pub fn etf(&self) -> Etf {
        Etf::new(self.delta_bar, self.delta_underbar).expect("validated spec")
    }
}

/// `ρ(t) = (ρ0 - ρ∞) e^{-κ t} + ρ∞`.
pub fn ppf(spec: &PerformanceSpec, t: f64) -> f64 {
    (spec.rho0 - spec.rho_inf) * (-spec.kappa * t).exp() + spec.rho_inf
}

/// Linear ramp from 1 at `inner` down to 0 at `outer`.
fn safety_ramp(value: f64, inner: f64, outer: f64) -> f64 {
    if value >= outer {
        0.0
    } else if value <= inner {
        1.0
    } else {
        (outer - value) / (outer - inner)
    }
}

/// Safety evaluation for the tracking controller: 1 inside `V ≤ Γ0`,
/// 0 outside `V ≥ Γ`, linear in between.
pub fn pse_bcfb(v: f64, gamma: f64, gamma0: f64) -> Result<f64, PerfError> {
    if !(gamma0 < gamma) {
        return Err(PerfError::InvalidLevels { inner: gamma0, outer: gamma });
    }
    Ok(safety_ramp(v, gamma0, gamma))
}

/// Safety evaluation for the performance controller on the unit level of Φ.
pub fn pse_bpc(phi: f64, phi0: f64) -> f64 {
    safety_ramp(phi, phi0, 1.0)
}

/// Dead-zone transition on `r = |e| / ρ`: 0 for `r ≤ ε/2`, 1 for `r ≥ ε`,
/// continuous linear ramp `2r/ε - 1` in between.
pub fn dzt(e: f64, rho: f64, eps: f64) -> f64 {
    let r = e.abs() / rho;
    if r <= 0.5 * eps {
        0.0
    } else if r >= eps {
        1.0
    } else {
        2.0 * r / eps - 1.0
    }
}

/// Error transform `T(z) = (δ̄ eᶻ - δ̲ e⁻ᶻ) / (eᶻ + e⁻ᶻ)` with its inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Etf {
    pub delta_bar: f64,
    pub delta_underbar: f64,
    /// Distance kept from either end of the band when inverting.
    pub clamp_margin: f64,
    /// When false, out-of-band ratios are an error instead of being clamped.
    pub clamping: bool,
}

/// Result of mapping `e / ρ` through the inverse transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtfPoint {
    pub z1: f64,
    pub lambda: f64,
    pub mu: f64,
    /// Ratio actually used after clamping.
    pub ratio: f64,
    pub clamped: bool,
}

impl Etf {
    pub fn new(delta_bar: f64, delta_underbar: f64) -> Result<Self, PerfError> {
        if !(delta_bar > 0.0 && delta_underbar > 0.0) {
            return Err(PerfError::InvalidSpec("ETF bounds must be positive".into()));
        }
        Ok(Self { delta_bar, delta_underbar, clamp_margin: 1e-6 * delta_bar.min(delta_underbar), clamping: true })
    }

    pub fn symmetric() -> Self {
        Self::new(1.0, 1.0).expect("valid")
    }

    /// `T(z1)`; evaluated through `e^{-2|z|}` so large `|z1|` cannot overflow.
    pub fn forward(&self, z1: f64) -> f64 {
        let (db, du) = (self.delta_bar, self.delta_underbar);
        let q = (-2.0 * z1.abs()).exp();
        if z1 >= 0.0 {
            (db - du * q) / (1.0 + q)
        } else {
            (db * q - du) / (q + 1.0)
        }
    }

    fn clamp_ratio(&self, r: f64) -> Result<(f64, bool), PerfError> {
        let lo = -self.delta_underbar + self.clamp_margin;
        let hi = self.delta_bar - self.clamp_margin;
        if r.is_nan() {
            return Err(PerfError::OutOfBand(r));
        }
        if r >= lo && r <= hi {
            return Ok((r, false));
        }
        if !self.clamping {
            if r > -self.delta_underbar && r < self.delta_bar {
                return Ok((r, false));
            }
            return Err(PerfError::OutOfBand(r));
        }
        Ok((r.clamp(lo, hi), true))
    }

    fn inverse_raw(&self, r: f64) -> f64 {
        0.5 * ((r + self.delta_underbar) / (self.delta_bar - r)).ln()
    }

    fn lambda_raw(&self, r: f64) -> f64 {
        0.5 * (1.0 / (r + self.delta_underbar) + 1.0 / (self.delta_bar - r))
    }

    /// `T⁻¹(r) = ½ ln((r + δ̲) / (δ̄ - r))`, after clamping `r` into the band.
    pub fn inverse(&self, r: f64) -> Result<f64, PerfError> {
        let (r, _) = self.clamp_ratio(r)?;
        Ok(self.inverse_raw(r))
    }

    /// `∂T⁻¹/∂r` at the clamped ratio.
    pub fn lambda(&self, r: f64) -> Result<f64, PerfError> {
        let (r, _) = self.clamp_ratio(r)?;
        Ok(self.lambda_raw(r))
    }

    /// Transformed error and its sensitivities at `(e, ρ)`.
    pub fn point(&self, e: f64, rho: f64) -> Result<EtfPoint, PerfError> {
        if !(rho > 0.0) {
            return Err(PerfError::InvalidSpec(format!("rho = {rho} must be positive")));
        }
        let (ratio, clamped) = self.clamp_ratio(e / rho)?;
        let lambda = self.lambda_raw(ratio);
        Ok(EtfPoint { z1: self.inverse_raw(ratio), lambda, mu: lambda / rho, ratio, clamped })
    }

    /// `(λ, μ)` with `μ = λ / ρ`.
    pub fn lambda_mu(&self, e: f64, rho: f64) -> Result<(f64, f64), PerfError> {
        self.point(e, rho).map(|p| (p.lambda, p.mu))
    }
}

/// `Γ = ρ² / (C X Cᵀ)` with `C = e1`.
pub fn gamma_level(rho: f64, x: &SquareMatrix) -> Result<f64, PerfError> {
    let cxc = x[(0, 0)];
    if !(cxc > 0.0) {
        return Err(PerfError::DegenerateX(cxc));
    }
    Ok(rho * rho / cxc)
}

/// `Γ = ρ² / (C X Cᵀ)` for a general output row `C`.
pub fn gamma_level_with(rho: f64, x: &SquareMatrix, c: &[f64]) -> Result<f64, PerfError> {
    let cxc = quadratic_form(x, c)?;
    if !(cxc > 0.0) {
        return Err(PerfError::DegenerateX(cxc));
    }
    Ok(rho * rho / cxc)
}

/// `Φ = zᵀ D_μ^{ν/2} P D_μ^{ν/2} z`.
pub fn phi_level(z: &[f64], p: &SquareMatrix, mu: f64, nu: f64) -> Result<f64, PerfError> {
    let d = build_dmu(p.dim(), mu, 0.5 * nu)?;
    let dz = d.mul_vec(z)?;
    Ok(quadratic_form(p, &dz)?)
}

/// As [`phi_level`], but rejects a `P` that is not positive definite.
pub fn phi_level_checked(z: &[f64], p: &SquareMatrix, mu: f64, nu: f64) -> Result<f64, PerfError> {
    if !crate::linalg::is_positive_definite(p)? {
        return Err(PerfError::NonPd);
    }
    phi_level(z, p, mu, nu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn case_a() -> PerformanceSpec {
        PerformanceSpec {
            rho0: 1.0,
            rho_inf: 0.1,
            kappa: 0.5,
            k_rho: 0.5,
            delta_bar: 1.0,
            delta_underbar: 1.0,
            sigma: 0.9,
            phi0: 0.7,
            epsilon_dz: 0.05,
        }
    }

    #[test]
    fn ppf_values() {
        let s = case_a();
        assert_eq!(ppf(&s, 0.0), 1.0);
        assert_abs_diff_eq!(ppf(&s, 200.0), 0.1, epsilon = 1e-12);
        // 0.9 e^{-1} + 0.1
        assert_abs_diff_eq!(ppf(&s, 2.0), 0.431_091_497_054_298_2, epsilon = 1e-12);
    }

    #[test]
    fn spec_validation() {
        assert!(case_a().validate().is_ok());
        let mut s = case_a();
        s.rho_inf = 1.5;
        assert!(s.validate().is_err());
        let mut s = case_a();
        s.sigma = 1.0;
        assert!(s.validate().is_err());
        let mut s = case_a();
        s.phi0 = 0.0;
        assert!(s.validate().is_err());
        let mut s = case_a();
        s.epsilon_dz = -1.0;
        assert!(s.validate().is_err());
        assert!(case_a().validate_rate_against(2.0).is_ok());
        assert!(case_a().validate_rate_against(0.4).is_err());
    }

    #[test]
    fn pse_boundaries() {
        let (g, g0) = (2.0, 1.8);
        assert_eq!(pse_bcfb(2.0, g, g0).unwrap(), 0.0);
        assert_eq!(pse_bcfb(1.8, g, g0).unwrap(), 1.0);
        assert_abs_diff_eq!(pse_bcfb(1.9, g, g0).unwrap(), 0.5, epsilon = 1e-12);
        assert_eq!(pse_bcfb(5.0, g, g0).unwrap(), 0.0);
        assert_eq!(pse_bcfb(0.0, g, g0).unwrap(), 1.0);
        assert!(matches!(pse_bcfb(1.0, 1.0, 1.0), Err(PerfError::InvalidLevels { .. })));

        assert_eq!(pse_bpc(1.0, 0.7), 0.0);
        assert_eq!(pse_bpc(0.7, 0.7), 1.0);
        assert_abs_diff_eq!(pse_bpc(0.85, 0.7), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn dzt_boundaries() {
        let eps = 0.05;
        let rho = 0.4;
        assert_eq!(dzt(0.25 * eps * rho, rho, eps), 0.0);
        assert_eq!(dzt(-2.0 * eps * rho, rho, eps), 1.0);
        assert_abs_diff_eq!(dzt(0.75 * eps * rho, rho, eps), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(dzt(0.5 * eps * rho, rho, eps), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dzt(eps * rho, rho, eps), 1.0, epsilon = 1e-12);
        assert_eq!(dzt(0.0, rho, eps), 0.0);
    }

    #[test]
    fn etf_symmetric_values() {
        let t = Etf::symmetric();
        assert_eq!(t.forward(0.0), 0.0);
        assert_abs_diff_eq!(t.forward(0.5), 0.5f64.tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(t.forward(0.5), 0.462_117_157_26, epsilon = 1e-10);
        assert_eq!(t.forward(800.0), 1.0);
        assert_eq!(t.forward(-800.0), -1.0);
        assert_eq!(t.inverse(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(t.inverse(0.5).unwrap(), 0.549_306_144_334_054_8, epsilon = 1e-12);
        assert_abs_diff_eq!(t.forward(t.inverse(0.9).unwrap()), 0.9, epsilon = 1e-10);
    }

    #[test]
    fn etf_asymmetric_limits() {
        let t = Etf::new(2.0, 0.5).unwrap();
        assert_abs_diff_eq!(t.forward(50.0), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.forward(-50.0), -0.5, epsilon = 1e-12);
        // zero of T sits at z = ½ ln(δ̲/δ̄)
        assert_abs_diff_eq!(t.forward(0.5 * (0.5f64 / 2.0).ln()), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn lambda_mu_values() {
        let t = Etf::symmetric();
        let (l, m) = t.lambda_mu(0.0, 1.0).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(m, 1.0);
        let (l, m) = t.lambda_mu(0.0, 2.0).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(m, 0.5);
        // capped at the clamp boundary
        let ec = t.clamp_margin;
        let cap = 0.5 * (1.0 / (1.0 - ec + 1.0) + 1.0 / ec);
        let p = t.point(5.0, 1.0).unwrap();
        assert!(p.clamped);
        assert_relative_eq!(p.lambda, cap, max_relative = 1e-9);
        assert!(!t.point(0.3, 1.0).unwrap().clamped);
    }

    #[test]
    fn clamping_can_be_disabled() {
        let mut t = Etf::symmetric();
        t.clamping = false;
        assert!(matches!(t.inverse(1.2), Err(PerfError::OutOfBand(_))));
        assert!(t.inverse(0.999_999_9).is_ok());
        assert!(matches!(t.point(-3.0, 1.0), Err(PerfError::OutOfBand(_))));
    }

    #[test]
    fn gamma_level_values() {
        let vh = 0.5;
        let x = SquareMatrix::scaled_identity(3, vh);
        assert_eq!(gamma_level(1.0, &x).unwrap(), 2.0);
        assert_eq!(gamma_level(2.0, &x).unwrap(), 8.0);
        let x = SquareMatrix::from_diag(&[2.0, 1.0, 1.0]);
        assert_abs_diff_eq!(gamma_level(0.1, &x).unwrap(), 0.005, epsilon = 1e-15);
        assert_eq!(gamma_level_with(0.1, &x, &[1.0, 0.0, 0.0]).unwrap(), gamma_level(0.1, &x).unwrap());
        assert!(matches!(gamma_level(1.0, &SquareMatrix::zeros(2)), Err(PerfError::DegenerateX(_))));
    }

    #[test]
    fn phi_level_values() {
        let p = SquareMatrix::from_diag(&[2.0, 3.0, 1.0]);
        let z = [0.3, -0.2, 0.5];
        let plain = quadratic_form(&p, &z).unwrap();
        assert_eq!(phi_level(&z, &p, 4.0, 0.0).unwrap(), plain);
        assert_eq!(phi_level(&[0.0; 3], &p, 4.0, 1.0).unwrap(), 0.0);
        assert_abs_diff_eq!(
            phi_level(&[1.0, 1.0, 1.0], &SquareMatrix::identity(3), 2.0, 2.0).unwrap(),
            6.0,
            epsilon = 1e-12
        );
        assert!(matches!(
            phi_level_checked(&z, &SquareMatrix::from_diag(&[1.0, -1.0, 1.0]), 1.0, 0.0),
            Err(PerfError::NonPd)
        ));
    }

    fn etf_strategy() -> impl Strategy<Value = Etf> {
        (0.2f64..3.0, 0.2f64..3.0).prop_map(|(a, b)| Etf::new(a, b).unwrap())
    }

    proptest! {
        #[test]
        fn ppf_strictly_decreasing(t1 in 0.0f64..30.0, dt in 1e-3f64..10.0) {
            let s = case_a();
            let (a, b) = (ppf(&s, t1), ppf(&s, t1 + dt));
            prop_assert!(b < a && b > s.rho_inf);
        }

        #[test]
        fn pse_is_lipschitz(v in 0.0f64..5.0, dv in 0.0f64..1e-2, gamma0 in 0.1f64..2.0, width in 0.05f64..2.0) {
            let gamma = gamma0 + width;
            let a = pse_bcfb(v, gamma, gamma0).unwrap();
            let b = pse_bcfb(v + dv, gamma, gamma0).unwrap();
            prop_assert!((a - b).abs() <= dv / width + 1e-12);
            let a = pse_bpc(v, gamma0 / (gamma0 + width));
            let b = pse_bpc(v + dv, gamma0 / (gamma0 + width));
            prop_assert!((a - b).abs() <= dv / (1.0 - gamma0 / (gamma0 + width)) + 1e-12);
        }

        #[test]
        fn pse_range_and_monotone(v1 in 0.0f64..5.0, v2 in 0.0f64..5.0, sigma in 0.05f64..0.95) {
            let g = 2.0;
            let (a, b) = (pse_bcfb(v1, g, sigma * g).unwrap(), pse_bcfb(v2, g, sigma * g).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
            if v1 <= v2 { prop_assert!(a >= b); } else { prop_assert!(a <= b); }
            let (c, d) = (pse_bpc(v1, sigma), pse_bpc(v2, sigma));
            prop_assert!((0.0..=1.0).contains(&c));
            if v1 <= v2 { prop_assert!(c >= d); } else { prop_assert!(c <= d); }
        }

        #[test]
        fn etf_forward_increasing_and_bounded(t in etf_strategy(), z in -40.0f64..40.0, dz in 1e-3f64..1.0) {
            let (a, b) = (t.forward(z), t.forward(z + dz));
            prop_assert!(b >= a);
            prop_assert!(a > -t.delta_underbar - 1e-12 && a < t.delta_bar + 1e-12);
            if z.abs() < 15.0 {
                prop_assert!(b > a);
                prop_assert!(a > -t.delta_underbar && a < t.delta_bar);
            }
        }

        #[test]
        fn etf_round_trip(t in etf_strategy(), u in 0.0f64..1.0) {
            let lo = -t.delta_underbar + 2.0 * t.clamp_margin;
            let hi = t.delta_bar - 2.0 * t.clamp_margin;
            let r = lo + u * (hi - lo);
            let back = t.forward(t.inverse(r).unwrap());
            prop_assert!((back - r).abs() <= 1e-10, "r={} back={}", r, back);
        }

        #[test]
        fn lambda_matches_central_difference(t in etf_strategy(), u in 0.001f64..0.999) {
            // stay a few steps inside the band so the stencil does not hit the clamp
            let h = 1e-6;
            let lo = -t.delta_underbar + 1e-3;
            let hi = t.delta_bar - 1e-3;
            let r = lo + u * (hi - lo);
            let fd = (t.inverse(r + h).unwrap() - t.inverse(r - h).unwrap()) / (2.0 * h);
            let l = t.lambda(r).unwrap();
            prop_assert!(((fd - l) / l).abs() <= 1e-5, "fd={} lambda={}", fd, l);
        }

        #[test]
        fn phi_with_zero_nu_ignores_mu(z in prop::collection::vec(-2.0f64..2.0, 3), mu in 0.01f64..50.0) {
            let p = SquareMatrix::from_diag(&[1.5, 0.5, 2.0]);
            let a = phi_level(&z, &p, mu, 0.0).unwrap();
            let b = phi_level(&z, &p, 1.0, 0.0).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
