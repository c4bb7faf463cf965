//! Resistivity laws for superconducting and dielectric regions.
//!
//! Superconductors follow `ρ = (E_c/J_c)(|J|/J_c)^n`, bounded below by a
//! floor. The critical current density is either constant, field dependent
//! through the Kim model, or read from per-component lift-factor tables.
//! Field dependence of `J_c` is always evaluated at a frozen field, so the
//! caller decides the linearization point.

use alloc::format;
use alloc::vec::Vec;

use crate::{math, Error, Result, Vec3, MU_0};

/// Default lower bound on the resistivity in Ω·m.
pub const DEFAULT_RHO_FLOOR: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawModel {
    pub ec: f64,
    pub jc: f64,
    pub n: f64,
    pub rho_floor: f64,
}

impl PowerLawModel {
    pub fn new(ec: f64, jc: f64, n: f64) -> Result<Self> {
        Self::with_floor(ec, jc, n, DEFAULT_RHO_FLOOR)
    }

    pub fn with_floor(ec: f64, jc: f64, n: f64, rho_floor: f64) -> Result<Self> {
        if !(ec > 0.0) || !(jc > 0.0) || !(n >= 1.0) || !(rho_floor >= 0.0) {
            return Err(Error::OutOfRange(format!(
                "power law needs E_c > 0, J_c > 0, n >= 1, floor >= 0 (got {ec}, {jc}, {n}, {rho_floor})"
            )));
        }
        Ok(PowerLawModel { ec, jc, n, rho_floor })
    }

    pub fn resistivity(&self, j_norm: f64) -> f64 {
        self.resistivity_with_jc(j_norm, self.jc)
    }

    pub fn resistivity_with_jc(&self, j_norm: f64, jc: f64) -> f64 {
        let rho = self.ec / jc * math::powf(j_norm / jc, self.n);
        rho.max(self.rho_floor)
    }

    /// `dρ/d|J|`; zero on the floor branch.
    pub fn d_resistivity(&self, j_norm: f64, jc: f64) -> f64 {
        let rho = self.ec / jc * math::powf(j_norm / jc, self.n);
        if rho <= self.rho_floor || j_norm == 0.0 {
            0.0
        } else {
            self.n * rho / j_norm
        }
    }

    /// Gradient `g = ∂ρ/∂J` so that `∂ρ/∂H_j = g · curl φ_j`.
    pub fn tangent(&self, j: &Vec3) -> Vec3 {
        let jn = math::norm(j);
        if jn == 0.0 {
            return [0.0; 3];
        }
        let d = self.d_resistivity(jn, self.jc) / jn;
        [d * j[0], d * j[1], d * j[2]]
    }
}

/// Kim model `J_c = J_c0 B_0 / (B_0 + μ0|H|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KimModel {
    pub jc0: f64,
    pub b0: f64,
}

impl KimModel {
    pub fn new(jc0: f64, b0: f64) -> Result<Self> {
        if !(jc0 > 0.0) || !(b0 > 0.0) {
            return Err(Error::OutOfRange(format!("Kim model needs J_c0 > 0 and B_0 > 0 (got {jc0}, {b0})")));
        }
        Ok(KimModel { jc0, b0 })
    }

    pub fn jc(&self, h_norm: f64) -> f64 {
        self.jc0 * self.b0 / (self.b0 + MU_0 * h_norm)
    }
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch–Carlson slopes),
/// clamped to the end values outside the sampled range.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCurve {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl MonotoneCurve {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.len() < 2 {
            return Err(Error::OutOfRange("a curve needs at least two samples of matching length".into()));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::OutOfRange("curve abscissae must be strictly increasing".into()));
        }
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = alloc::vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
        } else {
            for i in 1..n - 1 {
                if delta[i - 1] * delta[i] > 0.0 {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
                }
            }
            d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(MonotoneCurve { x, y, d })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if t <= self.x[0] {
            return self.y[0];
        }
        if t >= self.x[n - 1] {
            return self.y[n - 1];
        }
        let i = self.x.partition_point(|&v| v <= t) - 1;
        let h = self.x[i + 1] - self.x[i];
        let s = (t - self.x[i]) / h;
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        h00 * self.y[i] + h10 * h * self.d[i] + h01 * self.y[i + 1] + h11 * h * self.d[i + 1]
    }

    pub fn samples(&self) -> (&[f64], &[f64]) {
        (&self.x, &self.y)
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d * d0 <= 0.0 {
        0.0
    } else if d0 * d1 <= 0.0 && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

/// `J_c = J_c0 ‖(LF_1(|B_1|), LF_2(|B_2|), …)‖`, one curve per field component.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftFactorTable {
    pub jc0: f64,
    curves: Vec<MonotoneCurve>,
}

impl LiftFactorTable {
    pub fn new(jc0: f64, curves: Vec<MonotoneCurve>) -> Result<Self> {
        if !(jc0 > 0.0) {
            return Err(Error::OutOfRange(format!("J_c0 must be positive, got {jc0}")));
        }
        if curves.is_empty() || curves.len() > 3 {
            return Err(Error::OutOfRange("lift factor needs one to three component curves".into()));
        }
        for c in &curves {
            if c.y.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::OutOfRange("lift factors must be positive".into()));
            }
        }
        Ok(LiftFactorTable { jc0, curves })
    }

    pub fn lift_factors(&self, b: &Vec3) -> Vec<f64> {
        self.curves.iter().enumerate().map(|(i, c)| c.eval(b[i].abs())).collect()
    }

    pub fn jc(&self, b: &Vec3) -> f64 {
        let lf = self.lift_factors(b);
        self.jc0 * math::sqrt(lf.iter().map(|v| v * v).sum())
    }
}

/// How `J_c` depends on the local field.
#[derive(Debug, Clone, PartialEq)]
pub enum CriticalCurrent {
    Constant,
    Kim(KimModel),
    LiftFactor(LiftFactorTable),
}

/// Resistivity law of one subdomain.
#[derive(Debug, Clone, PartialEq)]
pub enum MaterialLaw {
    /// State-independent resistivity (air, normal metals).
    Constant(f64),
    Superconductor {
        power: PowerLawModel,
        jc: CriticalCurrent,
        /// Axis along which the resistivity is replaced by a constant,
        /// with the power law acting on the in-plane current only.
        stack: Option<(usize, f64)>,
    },
}

/// Constitutive response `E(J)` and its Jacobian `dE/dJ` at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Response {
    pub e: Vec3,
    pub de_dj: [[f64; 3]; 3],
    /// Dissipated power density `E · J`.
    pub power: f64,
}

/// Region tag of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Hts,
    Air,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubdomainMaterial {
    pub region: Region,
    pub law: MaterialLaw,
}

impl SubdomainMaterial {
    pub fn air(rho: f64) -> Self {
        SubdomainMaterial { region: Region::Air, law: MaterialLaw::Constant(rho) }
    }

    pub fn power_law(power: PowerLawModel) -> Self {
        SubdomainMaterial {
            region: Region::Hts,
            law: MaterialLaw::Superconductor { power, jc: CriticalCurrent::Constant, stack: None },
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.law, MaterialLaw::Constant(_))
    }

    /// `J_c` for a frozen field `h` (A/m). Constant laws return infinity.
    pub fn jc_effective(&self, h: &Vec3) -> f64 {
        match &self.law {
            MaterialLaw::Constant(_) => f64::INFINITY,
            MaterialLaw::Superconductor { power, jc, .. } => match jc {
                CriticalCurrent::Constant => power.jc,
                CriticalCurrent::Kim(k) => k.jc(math::norm(h)),
                CriticalCurrent::LiftFactor(t) => t.jc(&[MU_0 * h[0], MU_0 * h[1], MU_0 * h[2]]),
            },
        }
    }

    /// Scalar resistivity at current density `j` (in-plane part for stacks).
    pub fn resistivity(&self, j: &Vec3, jc: f64) -> f64 {
        match &self.law {
            MaterialLaw::Constant(rho) => *rho,
            MaterialLaw::Superconductor { power, stack, .. } => {
                power.resistivity_with_jc(math::norm(&in_plane(j, stack)), jc)
            }
        }
    }

    /// `E(J)` and `dE/dJ` with `J_c` frozen. Planar problems pass the
    /// out-of-plane current in component 2.
    pub fn response(&self, j: &Vec3, jc: f64) -> Response {
        let mut de = [[0.0; 3]; 3];
        match &self.law {
            MaterialLaw::Constant(rho) => {
                for (a, row) in de.iter_mut().enumerate() {
                    row[a] = *rho;
                }
                let e = [rho * j[0], rho * j[1], rho * j[2]];
                Response { e, de_dj: de, power: math::dot(&e, j) }
            }
            MaterialLaw::Superconductor { power, stack, .. } => {
                let jp = in_plane(j, stack);
                let jn = math::norm(&jp);
                let rho = power.resistivity_with_jc(jn, jc);
                let dr = power.d_resistivity(jn, jc);
                let mut e = [rho * jp[0], rho * jp[1], rho * jp[2]];
                for a in 0..3 {
                    if stack.map(|(ax, _)| ax == a).unwrap_or(false) {
                        continue;
                    }
                    de[a][a] = rho;
                    if jn > 0.0 {
                        for b in 0..3 {
                            de[a][b] += dr * jp[a] * jp[b] / jn;
                        }
                    }
                }
                if let Some((ax, rho_ax)) = stack {
                    e[*ax] = rho_ax * j[*ax];
                    de[*ax][*ax] = *rho_ax;
                }
                Response { e, de_dj: de, power: math::dot(&e, j) }
            }
        }
    }
}

fn in_plane(j: &Vec3, stack: &Option<(usize, f64)>) -> Vec3 {
    let mut jp = *j;
    if let Some((ax, _)) = stack {
        jp[*ax] = 0.0;
    }
    jp
}
