//! From a validated configuration to a ready-to-run problem.

use std::path::Path;

use htsfem_core::assembly::{ConstraintSurface, MaterialMap, Problem};
use htsfem_core::materials::{
    CriticalCurrent, KimModel, LiftFactorTable, MaterialLaw, MonotoneCurve, PowerLawModel, Region, SubdomainMaterial,
};
use htsfem_core::mesh::{Aabb, RefinementFlags, RootGrid, TreeMesh};
use htsfem_core::solver::{Excitation, NewtonConfig, TimeStepper};
use htsfem_core::space::build_space;
use htsfem_core::Vec3;

use crate::config::{CriticalCurrentConfig, ExcitationConfig, ScenarioConfig};
use crate::excitation::{AppliedField, InjectedCurrent, LineCurrent, NoLoad, NoNetCurrent, Waveform};
use crate::ConfigError;

const MM: f64 = 1e-3;

/// Everything a run needs.
pub struct Scenario {
    pub config: ScenarioConfig,
    pub problem: Problem,
    pub excitation: Box<dyn Excitation>,
    pub stepper: TimeStepper,
    pub newton: NewtonConfig,
    /// Superconductor box in meters.
    pub hts_box: Aabb,
    pub center: Vec3,
    /// Unit direction of an applied field and its amplitude in A/m.
    pub applied: Option<(Vec3, f64)>,
    /// Period of a sinusoidal excitation.
    pub period: Option<f64>,
}

fn to_box(lo: &[f64], hi: &[f64]) -> Aabb {
    let mut a = Aabb::new([0.0; 3], [0.0; 3]);
    for i in 0..lo.len() {
        a.lo[i] = lo[i] * MM;
        a.hi[i] = hi[i] * MM;
    }
    a
}

/// Interval sizes growing by `ratio` from `first`, rescaled to cover `length`.
fn graded(first: f64, ratio: f64, length: f64) -> Vec<f64> {
    let mut sizes = vec![first];
    while sizes.iter().sum::<f64>() < length * (1.0 - 1e-9) {
        let next = sizes.last().unwrap() * ratio;
        sizes.push(next);
    }
    let total: f64 = sizes.iter().sum();
    if ratio > 1.0 && sizes.len() > 1 {
        // scale down the overshoot while keeping the first size fixed
        let excess = total - length;
        let tail: f64 = sizes[1..].iter().sum();
        for s in &mut sizes[1..] {
            *s -= excess * *s / tail;
        }
    } else {
        let f = length / total;
        sizes.iter_mut().for_each(|s| *s *= f);
    }
    sizes
}

/// Root breakpoints along one axis: uniform across the device, geometric
/// in the air on both sides.
fn axis_breaks(dom: (f64, f64), hts: (f64, f64), roots: usize, ratio: f64) -> Vec<f64> {
    let h = (hts.1 - hts.0) / roots as f64;
    let mut breaks = vec![hts.0];
    let mut x = hts.0;
    for s in graded(h, ratio, hts.0 - dom.0) {
        x -= s;
        breaks.push(x);
    }
    *breaks.last_mut().unwrap() = dom.0;
    breaks.reverse();
    for i in 1..=roots {
        breaks.push(hts.0 + i as f64 * h);
    }
    *breaks.last_mut().unwrap() = hts.1;
    let mut x = hts.1;
    for s in graded(h, ratio, dom.1 - hts.1) {
        x += s;
        breaks.push(x);
    }
    *breaks.last_mut().unwrap() = dom.1;
    breaks
}

fn inside(b: &Aabb, p: &Vec3, dim: usize) -> bool {
    (0..dim).all(|a| p[a] > b.lo[a] && p[a] < b.hi[a])
}

/// Root grid aligned with the device, device cells refined to the target
/// level, optional graded refinement around it, 2:1 balanced.
pub fn build_mesh(cfg: &ScenarioConfig) -> Result<TreeMesh, ConfigError> {
    let dim = cfg.dim;
    let dom = to_box(&cfg.geometry.domain.lo, &cfg.geometry.domain.hi);
    let hts = to_box(&cfg.geometry.hts.lo, &cfg.geometry.hts.hi);
    let breaks = (0..dim)
        .map(|a| axis_breaks((dom.lo[a], dom.hi[a]), (hts.lo[a], hts.hi[a]), cfg.mesh.hts_roots[a], cfg.mesh.air_growth))
        .collect();
    let mesh_err = |e: htsfem_core::Error| ConfigError::Invalid { path: "mesh".into(), message: e.to_string() };
    let roots = RootGrid::from_breaks(dim, breaks).map_err(mesh_err)?;
    let mut mesh = TreeMesh::from_roots(roots).map_err(mesh_err)?;
    for _ in 0..cfg.mesh.hts_level {
        let marks = (0..mesh.num_cells()).map(|c| inside(&hts, &mesh.cell_center(c), dim)).collect();
        mesh = mesh.refine_and_balance(&RefinementFlags::from_marks(marks)).map_err(mesh_err)?;
    }
    if let Some(g) = &cfg.mesh.grading {
        for _ in 0..64 {
            let flags = mesh.geometric_grading_flags(&hts, g.level, g.decay).map_err(mesh_err)?;
            if flags.count() == 0 {
                break;
            }
            mesh = mesh.refine_and_balance(&flags).map_err(mesh_err)?;
        }
    }
    // every device cell must lie wholly inside or outside the box
    for c in 0..mesh.num_cells() {
        let b = mesh.cell_box(c);
        let straddles = (0..dim).all(|a| b.lo[a] < hts.hi[a] && b.hi[a] > hts.lo[a])
            && (0..dim).any(|a| b.lo[a] < hts.lo[a] - 1e-12 || b.hi[a] > hts.hi[a] + 1e-12);
        if straddles {
            return Err(ConfigError::Invalid {
                path: "mesh".into(),
                message: "superconductor box is not resolved by whole cells; adjust roots or level".into(),
            });
        }
    }
    Ok(mesh)
}

/// Lift-factor table from CSV rows `b,lf_x,lf_y[,lf_z]` (header allowed).
pub fn read_lift_factor(path: &Path, jc0: f64, dim: usize) -> Result<LiftFactorTable, ConfigError> {
    let key = "material.critical_current.file";
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); dim + 1];
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let nums: Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        match nums {
            Ok(v) if v.len() > dim => {
                for (c, x) in cols.iter_mut().zip(v) {
                    c.push(x);
                }
            }
            Ok(_) => {
                return Err(ConfigError::Invalid {
                    path: key.into(),
                    message: format!("line {} needs {} columns", ln + 1, dim + 1),
                })
            }
            Err(_) if cols[0].is_empty() => continue,
            Err(_) => {
                return Err(ConfigError::Invalid { path: key.into(), message: format!("line {} is not numeric", ln + 1) })
            }
        }
    }
    let err = |e: htsfem_core::Error| ConfigError::Invalid { path: key.into(), message: e.to_string() };
    let curves = (1..=dim).map(|c| MonotoneCurve::new(cols[0].clone(), cols[c].clone()).map_err(err)).collect::<Result<_, _>>()?;
    LiftFactorTable::new(jc0, curves).map_err(err)
}

fn superconductor(cfg: &ScenarioConfig) -> Result<SubdomainMaterial, ConfigError> {
    let m = &cfg.material;
    let inv = |e: htsfem_core::Error| ConfigError::Invalid { path: "material".into(), message: e.to_string() };
    let power = PowerLawModel::with_floor(m.ec, m.jc, m.n, m.rho_floor).map_err(inv)?;
    let jc = match &m.critical_current {
        CriticalCurrentConfig::Constant => CriticalCurrent::Constant,
        CriticalCurrentConfig::Kim { b0 } => CriticalCurrent::Kim(KimModel::new(m.jc, *b0).map_err(inv)?),
        CriticalCurrentConfig::LiftFactor { file } => CriticalCurrent::LiftFactor(read_lift_factor(file, m.jc, cfg.dim)?),
    };
    let stack = m.stack.as_ref().map(|s| (s.axis, s.rho.unwrap_or(m.rho_air)));
    Ok(SubdomainMaterial { region: Region::Hts, law: MaterialLaw::Superconductor { power, jc, stack } })
}

/// Direction of an applied field at angle `alpha` from the x-axis, in the
/// xz-plane (3D) or the xy-plane (2D).
pub fn field_direction(dim: usize, alpha: f64) -> Vec3 {
    if dim == 3 {
        [alpha.cos(), 0.0, alpha.sin()]
    } else {
        [alpha.cos(), alpha.sin(), 0.0]
    }
}

pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario, ConfigError> {
    cfg.validate()?;
    let dim = cfg.dim;
    let mesh = build_mesh(cfg)?;
    let hts_box = to_box(&cfg.geometry.hts.lo, &cfg.geometry.hts.hi);
    let mut center = [0.0; 3];
    for a in 0..dim {
        center[a] = 0.5 * (hts_box.lo[a] + hts_box.hi[a]);
    }
    let tags: Vec<usize> = (0..mesh.num_cells()).map(|c| usize::from(inside(&hts_box, &mesh.cell_center(c), dim))).collect();
    let materials = MaterialMap::new(vec![SubdomainMaterial::air(cfg.material.rho_air), superconductor(cfg)?], tags)
        .map_err(|e| ConfigError::Invalid { path: "material".into(), message: e.to_string() })?;
    let space = build_space(mesh, cfg.order).map_err(|e| ConfigError::Invalid { path: "order".into(), message: e.to_string() })?;

    let horizon = cfg.stepper.t_end;
    let (excitation, applied, period): (Box<dyn Excitation>, _, _) = match &cfg.excitation {
        ExcitationConfig::None {} => (Box::new(NoLoad { constrained: dim == 2 }), None, None),
        ExcitationConfig::AppliedField { amplitude, frequency, angle } => {
            let direction = field_direction(dim, *angle);
            let f = AppliedField { amplitude_b: *amplitude, frequency: *frequency, direction, horizon };
            let amp = amplitude / htsfem_core::MU_0;
            let ex: Box<dyn Excitation> = if dim == 2 { Box::new(NoNetCurrent(f)) } else { Box::new(f) };
            (ex, Some((direction, amp)), Some(1.0 / frequency))
        }
        ExcitationConfig::TransportCurrent { amplitude, frequency } => {
            let waveform = Waveform::Sine { amplitude: *amplitude, frequency: *frequency };
            (Box::new(LineCurrent { center, waveform, horizon }), None, Some(1.0 / frequency))
        }
        ExcitationConfig::Staircase { levels, plateau, ramp } => {
            let waveform = Waveform::Staircase { levels: levels.clone(), plateau: *plateau, ramp: *ramp };
            (Box::new(InjectedCurrent { waveform, horizon }), None, None)
        }
    };
    let surface = excitation.current(0.0).map(|_| ConstraintSurface::Region);
    let problem = Problem::new(space, materials, surface)
        .map_err(|e| ConfigError::Invalid { path: "geometry".into(), message: e.to_string() })?;

    let s = &cfg.stepper;
    let stepper = TimeStepper {
        dt_min: s.dt_min,
        dt_max: s.dt_max,
        dt_init: s.dt_init.unwrap_or(s.dt_max),
        kappa: s.kappa,
        theta: s.theta,
        t_end: s.t_end,
        reset_at_breakpoints: s.reset_at_breakpoints,
    };
    let newton = NewtonConfig { rtol: cfg.newton.rtol, atol: cfg.newton.atol, max_iter: cfg.newton.max_iter, ..Default::default() };
    Ok(Scenario { config: cfg.clone(), problem, excitation, stepper, newton, hts_box, center, applied, period })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    #[test]
    fn graded_sizes_cover_the_gap() {
        let s = graded(1.0, 2.0, 44.0);
        assert!((s.iter().sum::<f64>() - 44.0).abs() < 1e-12);
        assert_eq!(s[0], 1.0);
        assert!(s.windows(2).all(|w| w[1] >= w[0]));
        let b = axis_breaks((0.0, 100.0), (45.0, 55.0), 5, 2.0);
        assert_eq!(b[0], 0.0);
        assert_eq!(*b.last().unwrap(), 100.0);
        assert!(b.contains(&45.0) && b.contains(&55.0));
        assert!(b.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn tape_mesh_resolves_the_device() {
        let cfg = parse_config_str(
            r#"{
            "name": "t", "dim": 2,
            "geometry": {"domain": {"lo": [-50, -50], "hi": [50, 50]}, "hts": {"lo": [-6, -0.055], "hi": [6, 0.055]}},
            "mesh": {"hts_roots": [12, 1], "hts_level": 2},
            "material": {"n": 30, "jc": 3.38e8, "rho_air": 1},
            "excitation": {"transport_current": {"amplitude": 200, "frequency": 50}},
            "stepper": {"dt_min": 1e-7, "dt_max": 1e-4, "t_end": 0.02}
        }"#,
        )
        .unwrap();
        let sc = build_scenario(&cfg).unwrap();
        let mesh = sc.problem.space().mesh();
        let hts = sc.problem.materials().hts_cells();
        assert_eq!(hts.len(), 48 * 4);
        for &c in &hts {
            let h = mesh.cell_sizes(c);
            assert!((h[1] - 0.11e-3 / 4.0).abs() < 1e-12);
        }
        assert!(mesh.is_balanced());
        assert!(sc.problem.has_constraint());
    }
}
