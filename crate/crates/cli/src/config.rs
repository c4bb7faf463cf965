//! Scenario files: a JSON tree with geometry in millimeters and SI units
//! elsewhere. Unknown keys are rejected; every error names its key path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ConfigError;

fn one() -> usize {
    1
}
fn default_ec() -> f64 {
    1e-4
}
fn default_floor() -> f64 {
    htsfem_core::materials::DEFAULT_RHO_FLOOR
}
fn default_growth() -> f64 {
    2.0
}
fn default_kappa() -> f64 {
    5.0
}
fn default_theta() -> f64 {
    1.0
}
fn default_rtol() -> f64 {
    1e-10
}
fn default_max_iter() -> usize {
    25
}
fn default_true() -> bool {
    true
}

fn default_samples() -> usize {
    201
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Free text: provenance of the values, assumptions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub dim: usize,
    pub geometry: Geometry,
    pub mesh: MeshConfig,
    #[serde(default = "one")]
    pub order: usize,
    pub material: MaterialConfig,
    pub excitation: ExcitationConfig,
    pub stepper: StepperConfig,
    #[serde(default)]
    pub newton: NewtonSettings,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Boxes in millimeters; planar problems give two coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxMm {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub domain: BoxMm,
    pub hts: BoxMm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    /// Root cells across the superconductor along each axis.
    pub hts_roots: Vec<usize>,
    /// Refinement level of the superconducting cells.
    pub hts_level: u8,
    /// Size ratio of consecutive air root cells moving away from the device.
    #[serde(default = "default_growth")]
    pub air_growth: f64,
    #[serde(default)]
    pub grading: Option<Grading>,
}

/// Extra refinement around the superconductor: `level` inside, dropping one
/// level per `decay` cells outward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grading {
    pub level: u8,
    pub decay: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    pub n: f64,
    /// Electric field criterion (V/m).
    #[serde(default = "default_ec")]
    pub ec: f64,
    /// Critical current density (A/m²).
    pub jc: f64,
    /// Air resistivity (Ω·m).
    pub rho_air: f64,
    #[serde(default = "default_floor")]
    pub rho_floor: f64,
    #[serde(default)]
    pub critical_current: CriticalCurrentConfig,
    /// Anisotropic stack: no power-law current along `axis`.
    #[serde(default)]
    pub stack: Option<StackConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CriticalCurrentConfig {
    #[default]
    Constant,
    /// `B0` in tesla.
    Kim { b0: f64 },
    /// CSV with columns `b,lf_x,lf_y[,lf_z]`, B in tesla, relative to the file.
    LiftFactor { file: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub axis: usize,
    /// Resistivity along the axis; defaults to the air value.
    #[serde(default)]
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ExcitationConfig {
    /// No loading at all.
    None {},
    /// Uniform field `B sin(2π f t)` along `(cos α, 0, sin α)`; in 2D along
    /// `(cos α, sin α)`.
    AppliedField { amplitude: f64, frequency: f64, angle: f64 },
    /// Net current `I sin(2π f t)` through the superconductor (2D), with
    /// the field of a line current as boundary datum.
    TransportCurrent { amplitude: f64, frequency: f64 },
    /// Piecewise constant current with linear ramps of `ramp` seconds at the
    /// start of each `plateau`-long interval (2D); zero boundary datum.
    Staircase { levels: Vec<f64>, plateau: f64, ramp: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepperConfig {
    pub dt_min: f64,
    pub dt_max: f64,
    #[serde(default)]
    pub dt_init: Option<f64>,
    pub t_end: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub reset_at_breakpoints: bool,
    /// Restore the weak divergence of each new state against round-off.
    #[serde(default = "default_true")]
    pub gradient_correction: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonSettings {
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default)]
    pub atol: Option<f64>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings { rtol: default_rtol(), atol: None, max_iter: default_max_iter() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileQuantity {
    Field,
    Current,
}

/// Line samples taken at the given times (which become step breakpoints).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub name: String,
    pub from: Vec<f64>,
    pub to: Vec<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub quantity: ProfileQuantity,
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub directory: Option<PathBuf>,
    #[serde(default)]
    pub profiles: Vec<ProfileConfig>,
    #[serde(default)]
    pub vtk: bool,
    /// Window of the dissipation integral (s); defaults to the last half
    /// period of a periodic excitation.
    #[serde(default)]
    pub loss_window: Option<[f64; 2]>,
    /// Window of the magnetization loop (s); defaults to the last full
    /// peak-to-peak period of an applied field.
    #[serde(default)]
    pub loop_window: Option<[f64; 2]>,
}

const REQUIRED: [&str; 7] = ["name", "dim", "geometry", "mesh", "material", "excitation", "stepper"];

/// Parse and validate a scenario from JSON text.
pub fn parse_config_str(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let value: Value = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?
    };
    let Value::Object(map) = &value else {
        return Err(ConfigError::Syntax("the top level must be an object".into()));
    };
    let missing: Vec<&str> = REQUIRED.iter().copied().filter(|k| !map.contains_key(*k)).collect();
    if !missing.is_empty() {
        return Err(ConfigError::Missing(missing.join(", ")));
    }
    let cfg: ScenarioConfig =
        serde_json::from_value(value).map_err(|e| ConfigError::Invalid { path: "<root>".into(), message: e.to_string() })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Read and validate a scenario file. A lift-factor path is resolved
/// against the file's directory.
pub fn parse_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config_str(&text)?;
    if let CriticalCurrentConfig::LiftFactor { file } = &mut cfg.material.critical_current {
        if file.is_relative() {
            if let Some(dir) = path.parent() {
                *file = dir.join(&*file);
            }
        }
    }
    Ok(cfg)
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { path: path.into(), message: message.into() }
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(path, format!("must be positive, got {v}")))
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = self.dim;
        if d != 2 && d != 3 {
            return Err(invalid("dim", format!("must be 2 or 3, got {d}")));
        }
        if !(1..=3).contains(&self.order) {
            return Err(invalid("order", format!("must be 1, 2 or 3, got {}", self.order)));
        }
        let g = &self.geometry;
        for (name, b) in [("geometry.domain", &g.domain), ("geometry.hts", &g.hts)] {
            if b.lo.len() != d || b.hi.len() != d {
                return Err(invalid(name, format!("lo and hi need {d} coordinates")));
            }
            if (0..d).any(|a| !(b.hi[a] > b.lo[a])) {
                return Err(invalid(name, "hi must exceed lo along every axis"));
            }
        }
        if (0..d).any(|a| !(g.hts.lo[a] > g.domain.lo[a] && g.hts.hi[a] < g.domain.hi[a])) {
            return Err(invalid("geometry.hts", "must lie strictly inside the domain"));
        }
        let m = &self.mesh;
        if m.hts_roots.len() != d || m.hts_roots.contains(&0) {
            return Err(invalid("mesh.hts_roots", format!("needs {d} positive counts")));
        }
        if m.hts_level > 12 {
            return Err(invalid("mesh.hts_level", "at most 12"));
        }
        if !(m.air_growth >= 1.0) {
            return Err(invalid("mesh.air_growth", "must be at least 1"));
        }
        if let Some(gr) = &m.grading {
            if gr.decay == 0 || gr.level > 12 {
                return Err(invalid("mesh.grading", "decay must be positive and level at most 12"));
            }
        }
        let mat = &self.material;
        positive("material.n", mat.n)?;
        positive("material.ec", mat.ec)?;
        positive("material.jc", mat.jc)?;
        positive("material.rho_air", mat.rho_air)?;
        positive("material.rho_floor", mat.rho_floor)?;
        if let CriticalCurrentConfig::Kim { b0 } = mat.critical_current {
            positive("material.critical_current.b0", b0)?;
        }
        if let Some(s) = &mat.stack {
            if s.axis >= d {
                return Err(invalid("material.stack.axis", format!("must be below {d}")));
            }
            if let Some(r) = s.rho {
                positive("material.stack.rho", r)?;
            }
        }
        match &self.excitation {
            ExcitationConfig::None {} => {}
            ExcitationConfig::AppliedField { amplitude, frequency, angle } => {
                positive("excitation.applied_field.amplitude", *amplitude)?;
                positive("excitation.applied_field.frequency", *frequency)?;
                if !angle.is_finite() {
                    return Err(invalid("excitation.applied_field.angle", "must be finite"));
                }
            }
            ExcitationConfig::TransportCurrent { amplitude, frequency } => {
                positive("excitation.transport_current.amplitude", *amplitude)?;
                positive("excitation.transport_current.frequency", *frequency)?;
                if d != 2 {
                    return Err(invalid("excitation.transport_current", "only planar problems"));
                }
            }
            ExcitationConfig::Staircase { levels, plateau, ramp } => {
                positive("excitation.staircase.plateau", *plateau)?;
                positive("excitation.staircase.ramp", *ramp)?;
                if ramp >= plateau || levels.is_empty() || levels.iter().any(|l| !l.is_finite()) {
                    return Err(invalid("excitation.staircase", "needs finite levels and ramp < plateau"));
                }
                if d != 2 {
                    return Err(invalid("excitation.staircase", "only planar problems"));
                }
            }
        }
        let s = &self.stepper;
        positive("stepper.dt_min", s.dt_min)?;
        positive("stepper.dt_max", s.dt_max)?;
        positive("stepper.t_end", s.t_end)?;
        positive("stepper.kappa", s.kappa)?;
        if s.dt_min > s.dt_max {
            return Err(invalid("stepper.dt_min", "must not exceed dt_max"));
        }
        if let Some(dt) = s.dt_init {
            if !(dt >= s.dt_min && dt <= s.dt_max) {
                return Err(invalid("stepper.dt_init", "must lie within [dt_min, dt_max]"));
            }
        }
        if !(s.theta > 0.0 && s.theta <= 1.0) {
            return Err(invalid("stepper.theta", "must lie in (0, 1]"));
        }
        positive("newton.rtol", self.newton.rtol)?;
        if let Some(a) = self.newton.atol {
            positive("newton.atol", a)?;
        }
        if self.newton.max_iter == 0 {
            return Err(invalid("newton.max_iter", "must be at least 1"));
        }
        for (i, p) in self.output.profiles.iter().enumerate() {
            let path = format!("output.profiles[{i}]");
            if p.from.len() != d || p.to.len() != d || p.samples < 2 {
                return Err(invalid(&path, format!("needs {d}-coordinate end points and at least 2 samples")));
            }
            if p.times.iter().any(|&t| !(t > 0.0 && t <= s.t_end)) {
                return Err(invalid(&path, "times must lie in (0, t_end]"));
            }
        }
        for (name, w) in [("output.loss_window", self.output.loss_window), ("output.loop_window", self.output.loop_window)] {
            if let Some([a, b]) = w {
                if !(a >= 0.0 && b > a && b <= s.t_end) {
                    return Err(invalid(name, "must satisfy 0 ≤ start < end ≤ t_end"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
