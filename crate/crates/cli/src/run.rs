//! Time integration of a scenario and the derived reports.

use std::cell::RefCell;
use std::path::{Path, PathBuf};
use std::time::Instant;

use htsfem_core::assembly::Problem;
use htsfem_core::postproc::{
    ac_loss_qje, ac_loss_qmh, current_profile, hts_measure, line_profile, magnetization,
};
use htsfem_core::solver::{run_transient, RunOptions, StepRecord, TimeSeries};
use htsfem_core::space::FEFunction;
use htsfem_core::{math, Vec3};
use serde::Serialize;

use crate::config::{ProfileQuantity, ScenarioConfig};
use crate::excitation::WithStops;
use crate::output;
use crate::scenario::{build_scenario, Scenario};
use crate::RunError;

/// Columns of the per-step scalars.
pub const POWER: usize = 0;
pub const MAG_X: usize = 1;
pub const MAG_Y: usize = 2;
pub const MAG_Z: usize = 3;
/// Applied field along its direction (A/m).
pub const H_ALPHA: usize = 4;
pub const I_APP: usize = 5;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MeshStats {
    pub cells: usize,
    pub hts_cells: usize,
    pub vertices: usize,
    pub edges: usize,
    pub faces: usize,
    pub max_level: u8,
    pub dofs: usize,
    pub free_dofs: usize,
    pub dirichlet_dofs: usize,
    pub hanging_dofs: usize,
}

pub fn mesh_stats(problem: &Problem) -> MeshStats {
    let sp = problem.space();
    let m = sp.mesh();
    let c = sp.constraints();
    MeshStats {
        cells: m.num_cells(),
        hts_cells: problem.materials().hts_cells().len(),
        vertices: m.num_vertices(),
        edges: m.num_edges(),
        faces: m.num_faces(),
        max_level: m.max_level(),
        dofs: sp.n_dofs(),
        free_dofs: c.num_free(),
        dirichlet_dofs: c.num_dirichlet(),
        hanging_dofs: c.num_hanging(),
    }
}

/// Sampled line profile at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSample {
    pub name: String,
    pub time: f64,
    pub quantity: ProfileQuantity,
    /// `(arc length, point, vector)`; fields in A/m, currents in A/m².
    pub rows: Vec<(f64, Vec3, Vec3)>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct LossReport {
    /// Dissipation-based loss per cycle (J, or J/m in 2D).
    pub q_je: Option<f64>,
    pub window_je: Option<[f64; 2]>,
    /// Magnetization-loop loss per cycle.
    pub q_mh: Option<f64>,
    pub window_mh: Option<[f64; 2]>,
    pub loop_closure_gap: Option<f64>,
    /// `|Q_JE − Q_MH| / Q_JE`.
    pub relative_gap: Option<f64>,
}

/// Outcome of a simulation, in memory.
pub struct Simulation {
    pub series: TimeSeries,
    pub losses: LossReport,
    pub profiles: Vec<ProfileSample>,
    pub stats: MeshStats,
    pub wall_seconds: f64,
    /// Full coefficient vector of the last accepted step.
    pub final_state: Option<Vec<f64>>,
}

impl Simulation {
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.series.steps.iter().map(|s| s.scalars[k]).collect()
    }

    /// Times with the initial state prepended.
    pub fn times_from_zero(&self) -> Vec<f64> {
        std::iter::once(0.0).chain(self.series.steps.iter().map(|s| s.t)).collect()
    }
}

/// Default loss window: the last whole half period.
fn default_loss_window(period: f64, t_end: f64) -> Option<[f64; 2]> {
    let k = (2.0 * t_end / period + 1e-9).floor();
    (k >= 1.0).then(|| [(k - 1.0) * period / 2.0, k * period / 2.0])
}

/// Default loop window: the last full period between two positive peaks.
fn default_loop_window(period: f64, t_end: f64) -> Option<[f64; 2]> {
    let m = (t_end / period - 1.25 + 1e-9).floor();
    (m >= 0.0).then_some([(m + 0.25) * period, (m + 1.25) * period])
}

/// Per-step hook for callers that need the states.
pub type StepHook<'a> = &'a mut dyn FnMut(&Problem, f64, &[f64]);

/// Run a built scenario from rest to its final time.
pub fn simulate(sc: &mut Scenario, hook: Option<StepHook<'_>>) -> Result<Simulation, RunError> {
    let start = Instant::now();
    let cfg = sc.config.clone();
    let dim = cfg.dim;
    let center = sc.center;
    let applied = sc.applied;
    let profiles = RefCell::new(Vec::new());
    let hook = RefCell::new(hook);
    let last = RefCell::new(None);
    let excitation = &*sc.excitation;
    let stops: Vec<f64> = cfg.output.profiles.iter().flat_map(|p| p.times.iter().copied()).collect();
    let loaded = WithStops { inner: excitation, stops };
    let observer = |problem: &Problem, t: f64, h: &[f64]| -> Vec<f64> {
        let power = problem.dissipation(h);
        let m = magnetization(problem.space(), problem.materials(), h, &center);
        let h_alpha = applied.map(|(d, _)| math::dot(&d, &excitation.boundary_field(t, &[0.0; 3]))).unwrap_or(0.0);
        let i_app = excitation.current(t).unwrap_or(0.0);
        for p in &cfg.output.profiles {
            if p.times.iter().any(|&s| (s - t).abs() <= 1e-9 * cfg.stepper.t_end) {
                let f = FEFunction::from_full(problem.space(), h.to_vec());
                let mut a = [0.0; 3];
                let mut b = [0.0; 3];
                for i in 0..dim {
                    a[i] = p.from[i] * 1e-3;
                    b[i] = p.to[i] * 1e-3;
                }
                let rows = match p.quantity {
                    ProfileQuantity::Field => line_profile(&f, &a, &b, p.samples)
                        .map(|r| r.into_iter().map(|r| (r.s, r.point, r.h)).collect()),
                    ProfileQuantity::Current => current_profile(&f, &a, &b, p.samples).map(|r| {
                        let n = r.len().max(2) - 1;
                        r.into_iter()
                            .enumerate()
                            .map(|(i, (s, j))| {
                                let w = i as f64 / n as f64;
                                let pt = [a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1]), a[2] + w * (b[2] - a[2])];
                                (s, pt, j)
                            })
                            .collect()
                    }),
                };
                match rows {
                    Ok(rows) => profiles.borrow_mut().push(ProfileSample {
                        name: p.name.clone(),
                        time: t,
                        quantity: p.quantity,
                        rows,
                    }),
                    Err(e) => log::warn!("profile {} at t = {t}: {e}", p.name),
                }
            }
        }
        *last.borrow_mut() = Some(h.to_vec());
        if let Some(hk) = hook.borrow_mut().as_mut() {
            hk(problem, t, h);
        }
        vec![power, m[0], m[1], m[2], h_alpha, i_app]
    };
    let on_step = |i: usize, r: &StepRecord| {
        let betas: Vec<String> = r.newton.betas.iter().map(|b| format!("{b:.3}")).collect();
        log::info!(
            "step={i} t={:.9e} dt={:.6e} iters={} residual={:.3e} betas={}",
            r.t,
            r.dt,
            r.newton.iterations,
            r.newton.final_residual(),
            betas.join(";")
        );
    };
    let opts = RunOptions {
        newton: sc.newton,
        keep_states: false,
        observer: Some(Box::new(observer)),
        on_step: Some(Box::new(on_step)),
        gradient_correction: sc.config.stepper.gradient_correction,
    };
    let series = run_transient(&mut sc.problem, &loaded, &sc.stepper, opts).map_err(|e| RunError::Solver(e.to_string()))?;
    let stats = mesh_stats(&sc.problem);
    let mut sim = Simulation {
        series,
        losses: LossReport {
            q_je: None,
            window_je: None,
            q_mh: None,
            window_mh: None,
            loop_closure_gap: None,
            relative_gap: None,
        },
        profiles: profiles.into_inner(),
        stats,
        wall_seconds: 0.0,
        final_state: last.into_inner(),
    };
    if sim.series.is_complete() {
        sim.losses = losses(sc, &sim)?;
    }
    sim.wall_seconds = start.elapsed().as_secs_f64();
    Ok(sim)
}

fn losses(sc: &Scenario, sim: &Simulation) -> Result<LossReport, RunError> {
    let cfg = &sc.config;
    let t_end = cfg.stepper.t_end;
    let window_je = cfg.output.loss_window.or_else(|| sc.period.and_then(|p| default_loss_window(p, t_end)));
    let times = sim.times_from_zero();
    let mut power = vec![0.0];
    power.extend(sim.column(POWER));
    let q_je = match window_je {
        Some([a, b]) => Some(ac_loss_qje(&times, &power, a, b).map_err(|e| RunError::Solver(e.to_string()))?),
        None => None,
    };
    let mut report = LossReport { q_je, window_je, q_mh: None, window_mh: None, loop_closure_gap: None, relative_gap: None };
    if let Some((dir, _)) = sc.applied {
        let window = cfg.output.loop_window.or_else(|| sc.period.and_then(|p| default_loop_window(p, t_end)));
        if let Some([a, b]) = window {
            let tol = 1e-9 * t_end;
            let steps: Vec<&StepRecord> =
                sim.series.steps.iter().filter(|s| s.t >= a - tol && s.t <= b + tol).collect();
            if steps.len() >= 3 {
                let h: Vec<f64> = steps.iter().map(|s| s.scalars[H_ALPHA]).collect();
                let m: Vec<f64> = steps
                    .iter()
                    .map(|s| math::dot(&dir, &[s.scalars[MAG_X], s.scalars[MAG_Y], s.scalars[MAG_Z]]))
                    .collect();
                let volume = hts_measure(sc.problem.space(), sc.problem.materials());
                let l = ac_loss_qmh(&h, &m, volume).map_err(|e| RunError::Solver(e.to_string()))?;
                if l.closure_gap > 1e-3 {
                    log::warn!("magnetization loop not closed (gap {:.2e}); closed by a straight segment", l.closure_gap);
                }
                report.q_mh = Some(l.q);
                report.window_mh = Some([a, b]);
                report.loop_closure_gap = Some(l.closure_gap);
            }
        }
    }
    if let (Some(je), Some(mh)) = (report.q_je, report.q_mh) {
        if je != 0.0 {
            report.relative_gap = Some((je - mh).abs() / je.abs());
        }
    }
    Ok(report)
}

/// Command-line run options.
#[derive(Debug, Clone, Default)]
pub struct RunSettings {
    pub output: Option<PathBuf>,
    pub dry_run: bool,
    pub threads: Option<usize>,
}

/// What `run` reports back.
pub struct RunSummary {
    pub stats: MeshStats,
    pub simulation: Option<Simulation>,
    pub output_dir: PathBuf,
}

/// Build, run and write every artifact. Partial results are written before
/// a solver failure is returned.
pub fn run(cfg: &ScenarioConfig, settings: &RunSettings) -> Result<RunSummary, RunError> {
    if let Some(n) = settings.threads {
        htsfem_core::linalg::set_threads(n);
    }
    let out = settings
        .output
        .clone()
        .or_else(|| cfg.output.directory.clone())
        .unwrap_or_else(|| PathBuf::from(format!("out_{}", cfg.name)));
    let mut sc = build_scenario(cfg)?;
    let stats = mesh_stats(&sc.problem);
    std::fs::create_dir_all(&out)?;
    if settings.dry_run {
        output::write_json(&out.join("mesh_stats.json"), &stats)?;
        return Ok(RunSummary { stats, simulation: None, output_dir: out });
    }
    let sim = simulate(&mut sc, None)?;
    write_artifacts(&out, &sc, &sim)?;
    if let Some(f) = &sim.series.failure {
        return Err(RunError::Solver(format!("{f}; partial results in {}", out.display())));
    }
    Ok(RunSummary { stats, simulation: Some(sim), output_dir: out })
}

fn write_artifacts(dir: &Path, sc: &Scenario, sim: &Simulation) -> Result<(), RunError> {
    output::write_timeseries(&dir.join("timeseries.csv"), &sim.series)?;
    output::write_rejections(&dir.join("rejections.csv"), &sim.series)?;
    output::write_magnetization(&dir.join("magnetization.csv"), &sim.series, sc.applied.map(|a| a.0))?;
    output::write_json(&dir.join("losses.json"), &sim.losses)?;
    for p in &sim.profiles {
        output::write_profile(&dir.join(format!("profile_{}_t{:.6e}.csv", p.name, p.time)), p)?;
    }
    if sc.config.output.vtk {
        output::write_vtk(&dir.join("final.vtk"), &sc.problem, sim.final_state.as_deref())?;
    }
    let manifest = serde_json::json!({
        "config": sc.config,
        "version": env!("CARGO_PKG_VERSION"),
        "wall_seconds": sim.wall_seconds,
        "accepted_steps": sim.series.steps.len(),
        "rejected_steps": sim.series.rejected.len(),
        "failure": sim.series.failure.as_ref().map(|f| f.to_string()),
        "mesh": sim.stats,
    });
    output::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(())
}
