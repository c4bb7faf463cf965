//! Artifact writers: CSV tables, JSON reports and legacy VTK meshes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use htsfem_core::assembly::Problem;
use htsfem_core::postproc::cell_mean_current;
use htsfem_core::solver::TimeSeries;
use htsfem_core::{math, Vec3};
use serde::Serialize;

use crate::config::ProfileQuantity;
use crate::run::{ProfileSample, H_ALPHA, I_APP, MAG_X, MAG_Y, MAG_Z, POWER};

fn create(path: &Path) -> std::io::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()
}

/// One row per accepted step.
pub fn write_timeseries(path: &Path, series: &TimeSeries) -> std::io::Result<()> {
    let mut w = create(path)?;
    writeln!(
        w,
        "step,t_s,dt_s,newton_iterations,final_residual,power_W,m_x_A_per_m,m_y_A_per_m,m_z_A_per_m,h_applied_A_per_m,current_A,lambda"
    )?;
    for (i, s) in series.steps.iter().enumerate() {
        let c = &s.scalars;
        let lam = s.lambda.map(|l| format!("{l:.12e}")).unwrap_or_default();
        writeln!(
            w,
            "{i},{:.12e},{:.12e},{},{:.6e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{lam}",
            s.t,
            s.dt,
            s.newton.iterations,
            s.newton.final_residual(),
            c[POWER],
            c[MAG_X],
            c[MAG_Y],
            c[MAG_Z],
            c[H_ALPHA],
            c[I_APP]
        )?;
    }
    w.flush()
}

/// Failed step attempts, each followed by a halving of the step.
pub fn write_rejections(path: &Path, series: &TimeSeries) -> std::io::Result<()> {
    let mut w = create(path)?;
    writeln!(w, "t_s,dt_s,reason")?;
    for (t, dt, e) in &series.rejected {
        writeln!(w, "{t:.12e},{dt:.6e},\"{e}\"")?;
    }
    w.flush()
}

/// Magnetization history with its projection on the field direction.
pub fn write_magnetization(path: &Path, series: &TimeSeries, direction: Option<Vec3>) -> std::io::Result<()> {
    let mut w = create(path)?;
    writeln!(w, "t_s,h_applied_A_per_m,m_x_A_per_m,m_y_A_per_m,m_z_A_per_m,m_parallel_A_per_m")?;
    for s in &series.steps {
        let c = &s.scalars;
        let m = [c[MAG_X], c[MAG_Y], c[MAG_Z]];
        let par = direction.map(|d| math::dot(&d, &m)).unwrap_or(0.0);
        writeln!(w, "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}", s.t, c[H_ALPHA], m[0], m[1], m[2], par)?;
    }
    w.flush()
}

pub fn write_profile(path: &Path, p: &ProfileSample) -> std::io::Result<()> {
    let mut w = create(path)?;
    let (q, unit) = match p.quantity {
        ProfileQuantity::Field => ("h", "A_per_m"),
        ProfileQuantity::Current => ("j", "A_per_m2"),
    };
    writeln!(w, "# {} at t = {:.9e} s", p.name, p.time)?;
    writeln!(w, "s_m,x_m,y_m,z_m,{q}_x_{unit},{q}_y_{unit},{q}_z_{unit}")?;
    for (s, x, v) in &p.rows {
        writeln!(w, "{s:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}", x[0], x[1], x[2], v[0], v[1], v[2])?;
    }
    w.flush()
}

/// Legacy ASCII VTK of the leaf cells (pixels or voxels) with the material
/// tag and, given a state, cell-center H and mean J.
pub fn write_vtk(path: &Path, problem: &Problem, state: Option<&[f64]>) -> std::io::Result<()> {
    let space = problem.space();
    let mesh = space.mesh();
    let nc = mesh.num_cells();
    let nv = mesh.num_vertices();
    let per = mesh.vertices_per_cell();
    let mut w = create(path)?;
    writeln!(w, "# vtk DataFile Version 3.0\nhtsfem\nASCII\nDATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {nv} double")?;
    for v in 0..nv {
        let x = mesh.vertex_coords(v);
        writeln!(w, "{:.9e} {:.9e} {:.9e}", x[0], x[1], x[2])?;
    }
    writeln!(w, "CELLS {nc} {}", nc * (per + 1))?;
    for c in 0..nc {
        let ids: Vec<String> = mesh.cell_vertices(c).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{per} {}", ids.join(" "))?;
    }
    writeln!(w, "CELL_TYPES {nc}")?;
    let kind = if mesh.dim() == 2 { 8 } else { 11 };
    for _ in 0..nc {
        writeln!(w, "{kind}")?;
    }
    writeln!(w, "CELL_DATA {nc}\nSCALARS material int 1\nLOOKUP_TABLE default")?;
    for c in 0..nc {
        writeln!(w, "{}", u8::from(problem.materials().is_hts(c)))?;
    }
    if let Some(h) = state {
        writeln!(w, "VECTORS H double")?;
        for c in 0..nc {
            let mid = if mesh.dim() == 2 { [0.5, 0.5, 0.0] } else { [0.5; 3] };
            let (v, _) = space.eval_in_cell(h, c, &mid);
            writeln!(w, "{:.9e} {:.9e} {:.9e}", v[0], v[1], v[2])?;
        }
        writeln!(w, "VECTORS J double")?;
        for j in cell_mean_current(space, h) {
            writeln!(w, "{:.9e} {:.9e} {:.9e}", j[0], j[1], j[2])?;
        }
    }
    w.flush()
}
