//! Derived quantities: current density, magnetization, AC losses from
//! dissipation and from magnetization loops, line profiles, and a weak
//! divergence audit of the magnetic field.

use alloc::vec;
use alloc::vec::Vec;

use crate::assembly::MaterialMap;
use crate::gradient::NodalGradients;
use crate::quadrature::GaussRule;
use crate::space::{scale_basis, EdgeSpace, FEFunction};
use crate::{math, Error, Result, Vec3, MU_0};

/// `J = curl H` at a point.
pub fn current_density(f: &FEFunction, p: &Vec3) -> Result<Vec3> {
    f.evaluate_curl(p)
}

/// Cell averages of `curl H`.
pub fn cell_mean_current(space: &EdgeSpace, h: &[f64]) -> Vec<Vec3> {
    let tab = space.element().tabulate(&GaussRule::new(space.order() + 1));
    (0..space.mesh().num_cells())
        .map(|cell| {
            let mut acc = [0.0; 3];
            let hs = space.mesh().cell_sizes(cell);
            let scales = space.dof_scales(cell);
            let dofs = space.cell_dofs(cell);
            let mut vals = vec![[0.0; 3]; tab.n];
            let mut curls = vec![[0.0; 3]; tab.n];
            for q in 0..tab.len() {
                vals.copy_from_slice(tab.values(q));
                curls.copy_from_slice(tab.curls(q));
                scale_basis(space.dim(), &hs, scales.iter().copied(), &mut vals, &mut curls);
                for (i, &d) in dofs.iter().enumerate() {
                    math::axpy(tab.weights[q] * h[d], &curls[i], &mut acc);
                }
            }
            acc
        })
        .collect()
}

/// Total measure of the superconducting cells (area per unit depth in 2D).
pub fn hts_measure(space: &EdgeSpace, materials: &MaterialMap) -> f64 {
    let mesh = space.mesh();
    materials.hts_cells().iter().map(|&c| mesh.cell_box(c).measure(space.dim())).sum()
}

/// Magnetization of the current distribution about `center`:
/// `(1/2V) ∫ r × J` in 3D. Planar problems return the moment per unit depth
/// over the cross-section area, `(1/A) ∫ r × J`, since the return path of
/// the infinitely long loops contributes the other half.
pub fn magnetization(space: &EdgeSpace, materials: &MaterialMap, h: &[f64], center: &Vec3) -> Vec3 {
    let dim = space.dim();
    let mesh = space.mesh();
    let tab = space.element().tabulate(&GaussRule::new(space.order() + 2));
    let mut vals = vec![[0.0; 3]; tab.n];
    let mut curls = vec![[0.0; 3]; tab.n];
    let mut m = [0.0; 3];
    let mut measure = 0.0;
    for cell in materials.hts_cells() {
        let b = mesh.cell_box(cell);
        let hs = mesh.cell_sizes(cell);
        let vol = b.measure(dim);
        measure += vol;
        let scales = space.dof_scales(cell);
        let dofs = space.cell_dofs(cell);
        for q in 0..tab.len() {
            vals.copy_from_slice(tab.values(q));
            curls.copy_from_slice(tab.curls(q));
            scale_basis(dim, &hs, scales.iter().copied(), &mut vals, &mut curls);
            let mut j = [0.0; 3];
            for (i, &d) in dofs.iter().enumerate() {
                math::axpy(h[d], &curls[i], &mut j);
            }
            let x = tab.points[q];
            let mut r = [0.0; 3];
            for a in 0..dim {
                r[a] = b.lo[a] + x[a] * hs[a] - center[a];
            }
            math::axpy(tab.weights[q] * vol, &math::cross(&r, &j), &mut m);
        }
    }
    if measure == 0.0 {
        return [0.0; 3];
    }
    let f = if dim == 2 { 1.0 / measure } else { 0.5 / measure };
    [f * m[0], f * m[1], f * m[2]]
}

/// Linear interpolation of a sampled signal.
fn interp(times: &[f64], values: &[f64], t: f64) -> f64 {
    let i = times.partition_point(|&s| s < t);
    if i == 0 {
        return values[0];
    }
    if i >= times.len() {
        return values[times.len() - 1];
    }
    let (t0, t1) = (times[i - 1], times[i]);
    let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
    values[i - 1] + w * (values[i] - values[i - 1])
}

/// Trapezoidal integral of a sampled signal over `[t0, t1]`.
pub fn integrate_window(times: &[f64], values: &[f64], t0: f64, t1: f64) -> Result<f64> {
    if times.len() != values.len() || times.is_empty() {
        return Err(Error::Precondition("time and value samples differ in length".into()));
    }
    let tol = 1e-9 * (times[times.len() - 1] - times[0]).abs().max(f64::MIN_POSITIVE);
    if !(t0 < t1) || t0 < times[0] - tol || t1 > times[times.len() - 1] + tol {
        return Err(Error::OutOfRange("integration window outside the series".into()));
    }
    let mut pts = vec![(t0, interp(times, values, t0))];
    for (&t, &v) in times.iter().zip(values) {
        if t > t0 && t < t1 {
            pts.push((t, v));
        }
    }
    pts.push((t1, interp(times, values, t1)));
    Ok(pts.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum())
}

/// Loss per cycle from the dissipated power: `2 ∫_{t0}^{t1} P dt` over a
/// half-cycle window.
pub fn ac_loss_qje(times: &[f64], power: &[f64], t0: f64, t1: f64) -> Result<f64> {
    Ok(2.0 * integrate_window(times, power, t0, t1)?)
}

/// Result of a magnetization loop integral.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopIntegral {
    pub q: f64,
    /// `|H_end − H_start|` relative to the field range; nonzero when the
    /// loop had to be closed by a straight segment.
    pub closure_gap: f64,
}

/// Loss from a magnetization loop: `−μ0 V ∮ M_α dH_α`, trapezoidal along the
/// sampled path, closed by a straight segment if needed.
pub fn ac_loss_qmh(h_alpha: &[f64], m_alpha: &[f64], volume: f64) -> Result<LoopIntegral> {
    if h_alpha.len() != m_alpha.len() || h_alpha.len() < 3 {
        return Err(Error::Precondition("a loop needs at least three matching samples".into()));
    }
    let n = h_alpha.len();
    let mut s = 0.0;
    for i in 0..n - 1 {
        s += 0.5 * (m_alpha[i] + m_alpha[i + 1]) * (h_alpha[i + 1] - h_alpha[i]);
    }
    s += 0.5 * (m_alpha[n - 1] + m_alpha[0]) * (h_alpha[0] - h_alpha[n - 1]);
    let range = h_alpha.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let gap = if range > 0.0 { (h_alpha[n - 1] - h_alpha[0]).abs() / range } else { 0.0 };
    Ok(LoopIntegral { q: -MU_0 * volume * s, closure_gap: gap })
}

/// One sample of a line profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileRow {
    /// Arc length from the start point.
    pub s: f64,
    pub point: Vec3,
    pub h: Vec3,
    /// `μ0 H` in tesla.
    pub b: Vec3,
}

fn line_points(a: &Vec3, b: &Vec3, samples: usize) -> Result<Vec<(f64, Vec3)>> {
    if samples < 2 {
        return Err(Error::OutOfRange("a profile needs at least two samples".into()));
    }
    let d = math::sub(b, a);
    let len = math::norm(&d);
    Ok((0..samples)
        .map(|i| {
            let t = i as f64 / (samples - 1) as f64;
            (t * len, [a[0] + t * d[0], a[1] + t * d[1], a[2] + t * d[2]])
        })
        .collect())
}

/// Field samples along the segment `a → b`.
pub fn line_profile(f: &FEFunction, a: &Vec3, b: &Vec3, samples: usize) -> Result<Vec<ProfileRow>> {
    line_points(a, b, samples)?
        .into_iter()
        .map(|(s, p)| {
            let h = f.evaluate(&p)?;
            Ok(ProfileRow { s, point: p, h, b: [MU_0 * h[0], MU_0 * h[1], MU_0 * h[2]] })
        })
        .collect()
}

/// `curl H` samples along the segment `a → b`, as `(arc length, J)`.
pub fn current_profile(f: &FEFunction, a: &Vec3, b: &Vec3, samples: usize) -> Result<Vec<(f64, Vec3)>> {
    line_points(a, b, samples)?.into_iter().map(|(s, p)| Ok((s, f.evaluate_curl(&p)?))).collect()
}

/// Largest normalized weak divergence `|(H, ∇φ_v)| / (‖H‖ ‖∇φ_v‖)` over the
/// continuous piecewise multilinear hat functions of interior, unconstrained
/// vertices. Zero for a zero field.
pub fn solenoidality_defect(space: &EdgeSpace, h: &[f64]) -> f64 {
    let (dot, norm_g, norm_h) = NodalGradients::new(space.mesh()).weak_divergence(space, h);
    let norm_h = math::sqrt(norm_h);
    if norm_h == 0.0 {
        return 0.0;
    }
    dot.iter()
        .zip(&norm_g)
        .filter(|(_, &g)| g > 0.0)
        .map(|(d, g)| d.abs() / (norm_h * math::sqrt(*g)))
        .fold(0.0, f64::max)
}
