//! Scenario files (TOML) and their translation into a [`Simulation`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::ControllerKind;
use crate::invariant::{
    search_trivial_solution, CertMode, InvariantCertificate, InvariantError, LmiForm, SearchRequest,
};
use crate::linalg::SquareMatrix;
use crate::perf::{PerfError, PerformanceSpec};
use crate::plant::{
    paper_base_disturbance, plant_preset, zero_disturbance, DisturbanceSchedule, GainBounds, PlantError, PlantModel,
    StageFn,
};
use crate::sim::{ControllerSetup, ReferenceSignal, SimConfig, Simulation};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
}

/// Linear strict-feedback plant: `f_i = Σ_{j≤i} a_ij x_j`, constant `g_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlinePlant {
    /// Row `i` holds `a_i1..a_ii`.
    pub f: Vec<Vec<f64>>,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<InlinePlant>,
    pub x0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_max: Option<f64>,
}

fn zero() -> f64 {
    0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub kind: ControllerKind,
    pub gains: Vec<f64>,
    /// Filter time constants for stages `2..n`.
    pub tau: Vec<f64>,
    #[serde(default = "zero")]
    pub nu: f64,
    #[serde(default)]
    pub force_safe: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DisturbanceBase {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "paper-sec5")]
    PaperSec5,
}

fn default_decay() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSection {
    #[serde(default)]
    pub base: DisturbanceBase,
    #[serde(default)]
    pub pulse_times: Vec<f64>,
    #[serde(default)]
    pub pulse_amp: f64,
    #[serde(default = "default_decay")]
    pub pulse_decay: f64,
}

impl Default for DisturbanceSection {
    fn default() -> Self {
        Self { base: DisturbanceBase::None, pulse_times: vec![], pulse_amp: 0.0, pulse_decay: default_decay() }
    }
}

fn default_w_scale() -> f64 {
    1.0
}

/// Where the invariant certificate comes from when none is passed in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSection {
    /// Certificate file, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub form: LmiForm,
    #[serde(default = "default_w_scale")]
    pub w_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_range: Option<[f64; 2]>,
}

impl Default for CertificateSection {
    fn default() -> Self {
        Self { path: None, form: LmiForm::Eq5, w_scale: default_w_scale(), v_h: None, mu_range: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub plant: PlantSection,
    pub controller: ControllerSection,
    pub performance: PerformanceSpec,
    #[serde(default)]
    pub disturbance: DisturbanceSection,
    #[serde(default)]
    pub reference: ReferenceSignal,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub certificate: CertificateSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Default `μ` range sampled by performance-controller certificates.
pub const DEFAULT_MU_RANGE: [f64; 2] = [1.0, 10.0];

impl Scenario {
    pub fn from_toml(s: &str) -> Result<Self, ScenarioError> {
        toml::from_str(s).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn build_plant(&self) -> Result<PlantModel, ScenarioError> {
        let p = &self.plant;
        let mut plant = match (&p.preset, &p.inline) {
            (Some(name), None) => plant_preset(name)?,
            (None, Some(inline)) => inline_plant(inline)?,
            _ => return Err(ScenarioError::Invalid("plant needs exactly one of preset or inline".into())),
        };
        if p.u_min.is_some() || p.u_max.is_some() {
            let lo = p.u_min.unwrap_or(plant.u_min());
            let hi = p.u_max.unwrap_or(plant.u_max());
            plant = plant.with_input_bounds(lo, hi)?;
        }
        Ok(plant)
    }

    pub fn build_disturbance(&self, n: usize) -> Result<DisturbanceSchedule, ScenarioError> {
        let d = &self.disturbance;
        let base = match d.base {
            DisturbanceBase::None => zero_disturbance(n),
            DisturbanceBase::PaperSec5 => {
                if n != 3 {
                    return Err(ScenarioError::Invalid("the paper-sec5 disturbance needs a third-order plant".into()));
                }
                paper_base_disturbance()
            }
        };
        if d.pulse_times.iter().any(|t| !t.is_finite() || *t < 0.0) || !d.pulse_amp.is_finite() {
            return Err(ScenarioError::Invalid("pulse times must be finite and non-negative".into()));
        }
        Ok(DisturbanceSchedule::new(base, d.pulse_times.clone(), d.pulse_amp, d.pulse_decay))
    }

    /// Search request for this scenario's certificate.
    pub fn certificate_request(&self, plant: &PlantModel) -> SearchRequest {
        let c = &self.certificate;
        let n = self.controller.gains.len();
        let mode = match self.controller.kind {
            ControllerKind::Bpc => {
                let [lo, hi] = c.mu_range.unwrap_or(DEFAULT_MU_RANGE);
                CertMode::Prop2 { nu: self.controller.nu, mu_lo: lo, mu_hi: hi }
            }
            _ => CertMode::Prop1,
        };
        // the performance controller's envelope converges at k_ρ
        let kappa = match self.controller.kind {
            ControllerKind::Bpc => self.performance.k_rho,
            _ => self.performance.kappa,
        };
        SearchRequest {
            gains: self.controller.gains.clone(),
            kappa,
            w: SquareMatrix::scaled_identity(n, c.w_scale),
            g_bounds: plant.g_bounds().to_vec(),
            rho0: self.performance.rho0,
            rho_inf: self.performance.rho_inf,
            form: c.form,
            v_h: c.v_h,
            mode,
        }
    }

    /// Resolves the certificate: explicit argument, then the scenario's file,
    /// then a fresh search.
    pub fn resolve_certificate(
        &self,
        plant: &PlantModel,
        base_dir: &Path,
        explicit: Option<InvariantCertificate>,
    ) -> Result<InvariantCertificate, ScenarioError> {
        if let Some(c) = explicit {
            return Ok(c);
        }
        if let Some(p) = &self.certificate.path {
            let path = base_dir.join(p);
            let text = fs::read_to_string(&path).map_err(|source| ScenarioError::Io { path, source })?;
            return Ok(InvariantCertificate::from_text(&text)?);
        }
        Ok(search_trivial_solution(&self.certificate_request(plant))?)
    }

    pub fn build(&self, base_dir: &Path, cert: Option<InvariantCertificate>) -> Result<Simulation, ScenarioError> {
        self.performance.validate()?;
        let plant = self.build_plant()?;
        let n = plant.order();
        let c = &self.controller;
        if c.gains.len() != n {
            return Err(ScenarioError::Invalid(format!("{} gains for a plant of order {n}", c.gains.len())));
        }
        if c.tau.len() != n.saturating_sub(1) {
            return Err(ScenarioError::Invalid(format!("need {} filter time constants", n.saturating_sub(1))));
        }
        if self.plant.x0.len() != n {
            return Err(ScenarioError::Invalid(format!("x0 needs {n} entries")));
        }
        let disturbance = self.build_disturbance(n)?;
        let cert = self.resolve_certificate(&plant, base_dir, cert)?;
        Ok(Simulation {
            disturbance,
            reference: self.reference,
            controller: ControllerSetup {
                kind: c.kind,
                gains: c.gains.clone(),
                taus: c.tau.clone(),
                nu: c.nu,
                force_safe: c.force_safe,
                spec: self.performance,
                cert,
            },
            x0: self.plant.x0.clone(),
            plant,
        })
    }
}

fn inline_plant(p: &InlinePlant) -> Result<PlantModel, ScenarioError> {
    let n = p.g.len();
    if n == 0 || p.f.len() != n {
        return Err(ScenarioError::Invalid("inline plant needs one f row per g entry".into()));
    }
    let mut f: Vec<StageFn> = Vec::with_capacity(n);
    for (i, row) in p.f.iter().enumerate() {
        if row.len() != i + 1 {
            return Err(ScenarioError::Invalid(format!("inline f row {} needs {} coefficients", i + 1, i + 1)));
        }
        let row = row.clone();
        f.push(Arc::new(move |x: &[f64]| row.iter().zip(x).map(|(a, x)| a * x).sum()));
    }
    let mut g: Vec<StageFn> = Vec::with_capacity(n);
    let mut bounds = Vec::with_capacity(n);
    for &gi in &p.g {
        if gi.abs() < 1e-9 || !gi.is_finite() {
            return Err(ScenarioError::Invalid("inline g entries must be non-zero".into()));
        }
        g.push(Arc::new(move |_: &[f64]| gi));
        bounds.push(GainBounds { g_min: gi.abs(), g_max: gi.abs() });
    }
    Ok(PlantModel::new("inline", f, g, bounds, -f64::MAX, f64::MAX)?)
}

/// Writes `contents` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CASE_A: &str = include_str!("../scenarios/case-a.cfg");
    const CASE_B: &str = include_str!("../scenarios/case-b.cfg");

    #[test]
    fn presets_parse_and_build() {
        for text in [CASE_A, CASE_B] {
            let sc = Scenario::from_toml(text).unwrap();
            let sim = sc.build(Path::new("."), None).unwrap();
            assert_eq!(sim.order(), 3);
            assert!(sim.controller.cert.feasible);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = CASE_A.replace("[sim]", "[sim]\nbogus = 1");
        assert!(matches!(Scenario::from_toml(&bad), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn round_trip_preserves_scenario() {
        let sc = Scenario::from_toml(CASE_B).unwrap();
        assert_eq!(Scenario::from_toml(&sc.to_toml()).unwrap(), sc);
    }

    #[test]
    fn plant_needs_exactly_one_source() {
        let mut sc = Scenario::from_toml(CASE_A).unwrap();
        sc.plant.inline = Some(InlinePlant { f: vec![vec![0.0]], g: vec![1.0] });
        assert!(matches!(sc.build_plant(), Err(ScenarioError::Invalid(_))));
        sc.plant.preset = None;
        assert_eq!(sc.build_plant().unwrap().order(), 1);
    }

    #[test]
    fn inline_plant_checks_shapes() {
        assert!(inline_plant(&InlinePlant { f: vec![vec![1.0, 2.0]], g: vec![1.0] }).is_err());
        assert!(inline_plant(&InlinePlant { f: vec![vec![1.0]], g: vec![0.0] }).is_err());
        let p = inline_plant(&InlinePlant { f: vec![vec![-1.0], vec![0.5, 2.0]], g: vec![2.0, 1.0] }).unwrap();
        assert_eq!(p.f(1, &[1.0, 1.0]).unwrap(), 2.5);
        assert_eq!(p.g(0, &[1.0, 1.0]).unwrap(), 2.0);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        write_atomic(&p, "one").unwrap();
        write_atomic(&p, "two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
