//! Strict-feedback plant with a saturated input.
//!
//! ```text
//! ẋ_i = f_i(x̄_i) + g_i(x̄_i) x_{i+1} + ω_i,   i < n
//! ẋ_n = f_n(x̄_n) + g_n(x̄_n) sat(u) + ω_n
//! ```

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("invalid saturation bounds: u_min = {u_min} must be < u_max = {u_max}")]
    InvalidBounds { u_min: f64, u_max: f64 },
    #[error("saturation bounds must straddle zero (u_min = {u_min}, u_max = {u_max})")]
    BoundsExcludeZero { u_min: f64, u_max: f64 },
    #[error("expected {expected} states, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value from {what} at stage {stage}")]
    NonFinite { what: &'static str, stage: usize },
    #[error("invalid g bounds at stage {stage}: need g_max > g_min > 0")]
    InvalidGainBounds { stage: usize },
    #[error("unknown plant preset {0:?}")]
    UnknownPreset(String),
}

/// Clamp `u` to `[u_min, u_max]`.
pub fn saturate(u: f64, u_min: f64, u_max: f64) -> Result<f64, PlantError> {
    if !(u_min < u_max) {
        return Err(PlantError::InvalidBounds { u_min, u_max });
    }
    Ok(u.clamp(u_min, u_max))
}

/// Stage function of the first `i` states.
pub type StageFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Disturbance base term `(t, x) -> ω`.
pub type DisturbanceFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainBounds {
    pub g_min: f64,
    pub g_max: f64,
}

/// `f_i` and `g_i` receive the slice `x̄_i = x[..i]`.
#[derive(Clone)]
pub struct PlantModel {
    pub name: String,
    f: Vec<StageFn>,
    g: Vec<StageFn>,
    g_bounds: Vec<GainBounds>,
    u_min: f64,
    u_max: f64,
}

impl fmt::Debug for PlantModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlantModel")
            .field("name", &self.name)
            .field("n", &self.order())
            .field("g_bounds", &self.g_bounds)
            .field("u_min", &self.u_min)
            .field("u_max", &self.u_max)
            .finish()
    }
}

impl PlantModel {
    pub fn new(
        name: impl Into<String>,
        f: Vec<StageFn>,
        g: Vec<StageFn>,
        g_bounds: Vec<GainBounds>,
        u_min: f64,
        u_max: f64,
    ) -> Result<Self, PlantError> {
        let n = f.len();
        if g.len() != n {
            return Err(PlantError::DimensionMismatch { expected: n, got: g.len() });
        }
        if g_bounds.len() != n {
            return Err(PlantError::DimensionMismatch { expected: n, got: g_bounds.len() });
        }
        if !(u_min < u_max) {
            return Err(PlantError::InvalidBounds { u_min, u_max });
        }
        if !(u_min < 0.0 && u_max > 0.0) {
            return Err(PlantError::BoundsExcludeZero { u_min, u_max });
        }
        for (i, b) in g_bounds.iter().enumerate() {
            if !(b.g_min > 0.0 && b.g_max >= b.g_min) {
                return Err(PlantError::InvalidGainBounds { stage: i + 1 });
            }
        }
        Ok(Self { name: name.into(), f, g, g_bounds, u_min, u_max })
    }

    pub fn order(&self) -> usize {
        self.f.len()
    }

    pub fn u_min(&self) -> f64 {
        self.u_min
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub fn g_bounds(&self) -> &[GainBounds] {
        &self.g_bounds
    }

    pub fn with_input_bounds(mut self, u_min: f64, u_max: f64) -> Result<Self, PlantError> {
        if !(u_min < u_max) {
            return Err(PlantError::InvalidBounds { u_min, u_max });
        }
        if !(u_min < 0.0 && u_max > 0.0) {
            return Err(PlantError::BoundsExcludeZero { u_min, u_max });
        }
        self.u_min = u_min;
        self.u_max = u_max;
        Ok(self)
    }

    pub fn saturate(&self, u: f64) -> f64 {
        u.clamp(self.u_min, self.u_max)
    }

    /// `f_i(x̄_i)`, stage index `i` zero-based.
    pub fn f(&self, i: usize, x: &[f64]) -> Result<f64, PlantError> {
        let v = (self.f[i])(&x[..=i]);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(PlantError::NonFinite { what: "f", stage: i + 1 })
        }
    }

    /// `g_i(x̄_i)`, stage index `i` zero-based.
    pub fn g(&self, i: usize, x: &[f64]) -> Result<f64, PlantError> {
        let v = (self.g[i])(&x[..=i]);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(PlantError::NonFinite { what: "g", stage: i + 1 })
        }
    }

    pub fn f_all(&self, x: &[f64]) -> Result<Vec<f64>, PlantError> {
        (0..self.order()).map(|i| self.f(i, x)).collect()
    }

    pub fn g_all(&self, x: &[f64]) -> Result<Vec<f64>, PlantError> {
        (0..self.order()).map(|i| self.g(i, x)).collect()
    }

    /// Right-hand side of the plant for a raw (pre-saturation) input `u`.
    pub fn derivative(&self, x: &[f64], u: f64, omega: &[f64]) -> Result<Vec<f64>, PlantError> {
        let n = self.order();
        if x.len() != n {
            return Err(PlantError::DimensionMismatch { expected: n, got: x.len() });
        }
        if omega.len() != n {
            return Err(PlantError::DimensionMismatch { expected: n, got: omega.len() });
        }
        let mut dx = Vec::with_capacity(n);
        for i in 0..n {
            let next = if i + 1 < n { x[i + 1] } else { self.saturate(u) };
            let v = self.f(i, x)? + self.g(i, x)? * next + omega[i];
            if !v.is_finite() {
                return Err(PlantError::NonFinite { what: "derivative", stage: i + 1 });
            }
            dx.push(v);
        }
        Ok(dx)
    }

    /// Logs (never rejects) states where some `|g_i|` leaves its declared band.
    pub fn check_gain_bounds(&self, x: &[f64]) -> bool {
        let mut ok = true;
        for (i, b) in self.g_bounds.iter().enumerate() {
            if let Ok(g) = self.g(i, x) {
                if g.abs() < b.g_min || g.abs() > b.g_max {
                    log::warn!("|g{}| = {} outside [{}, {}]", i + 1, g.abs(), b.g_min, b.g_max);
                    ok = false;
                }
            }
        }
        ok
    }
}

/// Plant of the worked three-state example:
/// `f1 = sin x1 / (1 + x1²)`, `f2 = tanh(x2) exp(-(x1 x2)⁴)`, `f3 = x1 x2`,
/// unit input gains and `|u| ≤ 5`.
pub fn make_paper_plant() -> PlantModel {
    let f: Vec<StageFn> = vec![
        Arc::new(|x: &[f64]| x[0].sin() / (1.0 + x[0] * x[0])),
        Arc::new(|x: &[f64]| x[1].tanh() * (-(x[0] * x[1]).powi(4)).exp()),
        Arc::new(|x: &[f64]| x[0] * x[1]),
    ];
    let one: StageFn = Arc::new(|_: &[f64]| 1.0);
    let g = vec![one.clone(), one.clone(), one];
    let bounds = vec![GainBounds { g_min: 0.5, g_max: 1.5 }; 3];
    PlantModel::new("paper-sec5", f, g, bounds, -5.0, 5.0).expect("preset is valid")
}

/// Named plant presets.
pub fn plant_preset(name: &str) -> Result<PlantModel, PlantError> {
    match name {
        "paper-sec5" => Ok(make_paper_plant()),
        other => Err(PlantError::UnknownPreset(other.to_string())),
    }
}

/// Base disturbance of the worked example:
/// `ω1 = 0.1 sin(x1) cos t`, `ω2 = 0.15 sin(x1 x2)`, `ω3 = 0.1 cos(x3) sin t`.
pub fn paper_base_disturbance() -> DisturbanceFn {
    Arc::new(|t: f64, x: &[f64]| {
        vec![0.1 * x[0].sin() * t.cos(), 0.15 * (x[0] * x[1]).sin(), 0.1 * x[2].cos() * t.sin()]
    })
}

pub fn zero_disturbance(n: usize) -> DisturbanceFn {
    Arc::new(move |_, _| vec![0.0; n])
}

/// Base disturbance plus decaying pulses `a exp(-λ_p (t - t_j))`, applied to
/// every channel once `t >= t_j`.
#[derive(Clone)]
pub struct DisturbanceSchedule {
    base: DisturbanceFn,
    pub pulse_times: Vec<f64>,
    pub pulse_amp: f64,
    pub pulse_decay: f64,
}

impl fmt::Debug for DisturbanceSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DisturbanceSchedule")
            .field("pulse_times", &self.pulse_times)
            .field("pulse_amp", &self.pulse_amp)
            .field("pulse_decay", &self.pulse_decay)
            .finish_non_exhaustive()
    }
}

impl DisturbanceSchedule {
    pub fn new(base: DisturbanceFn, pulse_times: Vec<f64>, pulse_amp: f64, pulse_decay: f64) -> Self {
        Self { base, pulse_times, pulse_amp, pulse_decay }
    }

    pub fn without_pulses(base: DisturbanceFn) -> Self {
        Self::new(base, Vec::new(), 0.0, 1.0)
    }

    /// Summed pulse contribution at `t` (same on every channel).
    pub fn pulse(&self, t: f64) -> f64 {
        self.pulse_times
            .iter()
            .filter(|&&tj| t >= tj)
            .map(|&tj| self.pulse_amp * (-self.pulse_decay * (t - tj)).exp())
            .sum()
    }

    pub fn evaluate(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let p = self.pulse(t);
        let mut w = (self.base)(t, x);
        for wi in &mut w {
            *wi += p;
        }
        w
    }
}
