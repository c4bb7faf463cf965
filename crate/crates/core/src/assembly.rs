//! Mass, curl-curl and constraint assembly, and the nonlinear system of one
//! θ-scheme time step.
//!
//! Cell contributions are computed on full (unconstrained) coefficient
//! vectors and then folded onto free DoFs through the closed constraint
//! expansions, which is the elimination `Pᵀ A P` with the Dirichlet offset
//! carried in the full vector.
//!
//! Unknowns of a step are `[H_free; λ']` where `λ'` is the multiplier of the
//! current constraint divided by `μ0/Δt`. Both the multiplier column and the
//! constraint row carry that factor so the Jacobian stays symmetric.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Tabulation;
use crate::linalg::SaddleSolver;
use crate::materials::{MaterialLaw, Region, SubdomainMaterial};
use crate::quadrature::GaussRule;
use crate::solver::NonlinearSystem;
use crate::space::{scale_basis, EdgeSpace};
use crate::sparse::CsrMatrix;
use crate::{math, Error, Result, Vec3, MU_0};

/// Material of every leaf cell.
#[derive(Debug, Clone)]
pub struct MaterialMap {
    materials: Vec<SubdomainMaterial>,
    cell_material: Vec<usize>,
}

impl MaterialMap {
    pub fn new(materials: Vec<SubdomainMaterial>, cell_material: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = cell_material.iter().find(|&&m| m >= materials.len()) {
            return Err(Error::OutOfRange(format!("material index {bad} out of range")));
        }
        Ok(MaterialMap { materials, cell_material })
    }

    pub fn uniform(material: SubdomainMaterial, num_cells: usize) -> Self {
        MaterialMap { materials: vec![material], cell_material: vec![0; num_cells] }
    }

    pub fn material(&self, cell: usize) -> &SubdomainMaterial {
        &self.materials[self.cell_material[cell]]
    }

    pub fn materials(&self) -> &[SubdomainMaterial] {
        &self.materials
    }

    pub fn is_hts(&self, cell: usize) -> bool {
        self.material(cell).region == Region::Hts
    }

    pub fn num_cells(&self) -> usize {
        self.cell_material.len()
    }

    pub fn hts_cells(&self) -> Vec<usize> {
        (0..self.cell_material.len()).filter(|&c| self.is_hts(c)).collect()
    }
}

/// Section through which the net current is imposed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstraintSurface {
    /// Planar problems: the whole superconducting cross-section.
    Region,
    /// The plane `x_axis = coord` restricted to superconducting cells; it
    /// must coincide with cell faces.
    Plane { axis: usize, coord: f64 },
}

/// Reference matrices `∫ φ̂_i,c φ̂_j,c` and `∫ curl̂_i,c curl̂_j,c` per component.
#[derive(Debug, Clone)]
struct ReferenceMatrices {
    mass: [Vec<f64>; 3],
    curl: [Vec<f64>; 3],
}

fn reference_matrices(tab: &Tabulation) -> ReferenceMatrices {
    let n = tab.n;
    let mut mass = [vec![0.0; n * n], vec![0.0; n * n], vec![0.0; n * n]];
    let mut curl = [vec![0.0; n * n], vec![0.0; n * n], vec![0.0; n * n]];
    for q in 0..tab.len() {
        let w = tab.weights[q];
        let v = tab.values(q);
        let c = tab.curls(q);
        for c_ in 0..3 {
            for i in 0..n {
                for j in 0..n {
                    mass[c_][i * n + j] += w * v[i][c_] * v[j][c_];
                    curl[c_][i * n + j] += w * c[i][c_] * c[j][c_];
                }
            }
        }
    }
    ReferenceMatrices { mass, curl }
}

/// Geometry of a leaf as needed by the local kernels.
struct CellGeom {
    h: Vec3,
    vol: f64,
    scales: Vec<f64>,
}

/// Space, materials and the reusable pieces of the discrete operator.
#[derive(Debug, Clone)]
pub struct Problem {
    space: EdgeSpace,
    materials: MaterialMap,
    refs: ReferenceMatrices,
    tab_std: Tabulation,
    tab_hts: Tabulation,
    pattern: CsrMatrix,
    constraint: Option<Vec<f64>>,
    solver: SaddleSolver,
}

impl Problem {
    pub fn new(space: EdgeSpace, materials: MaterialMap, surface: Option<ConstraintSurface>) -> Result<Self> {
        if materials.num_cells() != space.mesh().num_cells() {
            return Err(Error::Precondition("material map does not match the mesh".into()));
        }
        let k = space.order();
        let tab_std = space.element().tabulate(&GaussRule::new(k + 2));
        let tab_hts = space.element().tabulate(&GaussRule::new(k + 3));
        let refs = reference_matrices(&tab_std);
        let nf = space.num_free();
        let cons = space.constraints();
        let mut rows = vec![BTreeSet::new(); nf];
        let mut group = Vec::new();
        for cell in 0..space.mesh().num_cells() {
            group.clear();
            for &g in space.cell_dofs(cell) {
                group.extend_from_slice(cons.expansion(g).0);
            }
            group.sort_unstable();
            group.dedup();
            for &i in &group {
                rows[i].extend(group.iter().copied());
            }
        }
        for (i, r) in rows.iter_mut().enumerate() {
            r.insert(i);
        }
        let pattern = CsrMatrix::from_rows(&rows);
        let mut p = Problem {
            space,
            materials,
            refs,
            tab_std,
            tab_hts,
            pattern,
            constraint: None,
            solver: SaddleSolver::new(),
        };
        if let Some(s) = surface {
            p.constraint = Some(assemble_constraint_row(&p.space, &p.materials, s)?);
        }
        Ok(p)
    }

    pub fn space(&self) -> &EdgeSpace {
        &self.space
    }

    /// Mutable access for updating Dirichlet data.
    pub fn space_mut(&mut self) -> &mut EdgeSpace {
        &mut self.space
    }

    pub fn materials(&self) -> &MaterialMap {
        &self.materials
    }

    pub fn has_constraint(&self) -> bool {
        self.constraint.is_some()
    }

    /// Constraint row over all global DoFs, if a current is imposed.
    pub fn constraint_row(&self) -> Option<&[f64]> {
        self.constraint.as_deref()
    }

    /// Number of unknowns of a step: free DoFs plus the multiplier.
    pub fn num_unknowns(&self) -> usize {
        self.space.num_free() + usize::from(self.has_constraint())
    }

    fn geom(&self, cell: usize) -> CellGeom {
        let h = self.space.mesh().cell_sizes(cell);
        let dim = self.space.dim();
        let vol = (0..dim).map(|a| h[a]).product();
        CellGeom { h, vol, scales: self.space.dof_scales(cell) }
    }

    fn local_mass(&self, g: &CellGeom, out: &mut [f64]) {
        let n = g.scales.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..self.space.dim() {
            let f = g.vol / (g.h[c] * g.h[c]);
            let m = &self.refs.mass[c];
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] += f * g.scales[i] * g.scales[j] * m[i * n + j];
                }
            }
        }
    }

    fn local_curl(&self, g: &CellGeom, rho: f64, out: &mut [f64]) {
        let n = g.scales.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        let dim = self.space.dim();
        let comps: &[usize] = if dim == 2 { &[2] } else { &[0, 1, 2] };
        for &c in comps {
            let f = if dim == 2 { rho / g.vol } else { rho * g.h[c] * g.h[c] / g.vol };
            let k = &self.refs.curl[c];
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] += f * g.scales[i] * g.scales[j] * k[i * n + j];
                }
            }
        }
    }

    /// Physical curls of a cell's basis at nonlinear quadrature point `q`.
    fn curls_at(&self, g: &CellGeom, q: usize, vals: &mut [Vec3], curls: &mut [Vec3]) {
        vals.copy_from_slice(self.tab_hts.values(q));
        curls.copy_from_slice(self.tab_hts.curls(q));
        scale_basis(self.space.dim(), &g.h, g.scales.iter().copied(), vals, curls);
    }

    /// Split step unknowns into a full coefficient vector and the scaled multiplier.
    pub fn expand_unknowns(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let nf = self.space.num_free();
        let lam = if self.has_constraint() { x[nf] } else { 0.0 };
        (self.space.expand(&x[..nf]), lam)
    }

    /// Fold a full-space vector of residual contributions onto free DoFs.
    fn fold(&self, full: &[f64], out: &mut [f64]) {
        let cons = self.space.constraints();
        for (g, &v) in full.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let (idx, w) = cons.expansion(g);
            for (&f, &w) in idx.iter().zip(w) {
                out[f] += w * v;
            }
        }
    }

    fn scatter_local(&self, cell: usize, local: &[f64], a: &mut CsrMatrix) {
        let cons = self.space.constraints();
        let dofs = self.space.cell_dofs(cell);
        let n = dofs.len();
        for i in 0..n {
            let (ri, wi) = cons.expansion(dofs[i]);
            if ri.is_empty() {
                continue;
            }
            for j in 0..n {
                let v = local[i * n + j];
                if v == 0.0 {
                    continue;
                }
                let (rj, wj) = cons.expansion(dofs[j]);
                for (&fi, &wi) in ri.iter().zip(wi) {
                    for (&fj, &wj) in rj.iter().zip(wj) {
                        a.add(fi, fj, wi * wj * v);
                    }
                }
            }
        }
    }

    /// `J_c` at every nonlinear quadrature point of the superconducting cells,
    /// evaluated from the field `h` (full coefficients).
    pub fn frozen_jc(&self, h: &[f64]) -> Vec<Vec<f64>> {
        let nq = self.tab_hts.len();
        let n = self.space.element().n_dofs();
        let mut vals = vec![[0.0; 3]; n];
        let mut curls = vec![[0.0; 3]; n];
        (0..self.space.mesh().num_cells())
            .map(|cell| {
                let mat = self.materials.material(cell);
                if mat.is_linear() {
                    return Vec::new();
                }
                let g = self.geom(cell);
                let dofs = self.space.cell_dofs(cell);
                (0..nq)
                    .map(|q| {
                        self.curls_at(&g, q, &mut vals, &mut curls);
                        let mut hv = [0.0; 3];
                        for (j, &d) in dofs.iter().enumerate() {
                            math::axpy(h[d], &vals[j], &mut hv);
                        }
                        mat.jc_effective(&hv)
                    })
                    .collect()
            })
            .collect()
    }

    /// `∫ ρ|J|²` over the superconducting cells for the field `h`.
    pub fn dissipation(&self, h: &[f64]) -> f64 {
        let jc = self.frozen_jc(h);
        let n = self.space.element().n_dofs();
        let mut vals = vec![[0.0; 3]; n];
        let mut curls = vec![[0.0; 3]; n];
        let mut total = 0.0;
        for cell in 0..self.space.mesh().num_cells() {
            if !self.materials.is_hts(cell) {
                continue;
            }
            let mat = self.materials.material(cell);
            let g = self.geom(cell);
            let dofs = self.space.cell_dofs(cell);
            for q in 0..self.tab_hts.len() {
                self.curls_at(&g, q, &mut vals, &mut curls);
                let mut j = [0.0; 3];
                for (i, &d) in dofs.iter().enumerate() {
                    math::axpy(h[d], &curls[i], &mut j);
                }
                let jcq = if mat.is_linear() { f64::INFINITY } else { jc[cell][q] };
                total += self.tab_hts.weights[q] * g.vol * mat.response(&j, jcq).power;
            }
        }
        total
    }

    /// Free-DoF mass matrix.
    pub fn mass_matrix(&self) -> CsrMatrix {
        let mut a = self.pattern.clone();
        let n = self.space.element().n_dofs();
        let mut loc = vec![0.0; n * n];
        for cell in 0..self.space.mesh().num_cells() {
            self.local_mass(&self.geom(cell), &mut loc);
            self.scatter_local(cell, &loc, &mut a);
        }
        a
    }

    /// Free-DoF secant stiffness `∫ ρ(curl H) curl φ_i · curl φ_j` at field `h`.
    pub fn stiffness_matrix(&self, h: &[f64]) -> CsrMatrix {
        let jc = self.frozen_jc(h);
        let mut a = self.pattern.clone();
        let n = self.space.element().n_dofs();
        let mut loc = vec![0.0; n * n];
        let mut vals = vec![[0.0; 3]; n];
        let mut curls = vec![[0.0; 3]; n];
        for cell in 0..self.space.mesh().num_cells() {
            let mat = self.materials.material(cell);
            let g = self.geom(cell);
            if let MaterialLaw::Constant(rho) = mat.law {
                self.local_curl(&g, rho, &mut loc);
            } else {
                loc.iter_mut().for_each(|v| *v = 0.0);
                let dofs = self.space.cell_dofs(cell);
                for q in 0..self.tab_hts.len() {
                    self.curls_at(&g, q, &mut vals, &mut curls);
                    let mut j = [0.0; 3];
                    for (i, &d) in dofs.iter().enumerate() {
                        math::axpy(h[d], &curls[i], &mut j);
                    }
                    let w = self.tab_hts.weights[q] * g.vol;
                    let rho = mat.resistivity(&j, jc[cell][q]);
                    for a_ in 0..n {
                        for b in 0..n {
                            loc[a_ * n + b] += w * rho * math::dot(&curls[a_], &curls[b]);
                        }
                    }
                }
            }
            self.scatter_local(cell, &loc, &mut a);
        }
        a
    }

    /// The nonlinear system of one step from `h_prev` (full coefficients).
    /// Dirichlet data of the new time level must already be applied.
    pub fn step<'p>(&'p mut self, h_prev: &'p [f64], dt: f64, theta: f64, i_app: f64) -> Result<TransientStep<'p>> {
        if !(dt > 0.0) {
            return Err(Error::OutOfRange(format!("time step must be positive, got {dt}")));
        }
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::OutOfRange(format!("theta must lie in (0, 1], got {theta}")));
        }
        Ok(TransientStep { problem: self, h_prev, dt, theta, i_app, source: None, jc: Vec::new(), jac_norm: 0.0 })
    }
}

/// Constraint row `C` over all global DoFs with `C·H = ∫_S curl H · n`.
pub fn assemble_constraint_row(
    space: &EdgeSpace,
    materials: &MaterialMap,
    surface: ConstraintSurface,
) -> Result<Vec<f64>> {
    let mesh = space.mesh();
    let dim = space.dim();
    let el = space.element();
    let n = el.n_dofs();
    let k = space.order();
    let mut row = vec![0.0; space.n_dofs()];
    let mut vals = vec![[0.0; 3]; n];
    let mut curls = vec![[0.0; 3]; n];
    match surface {
        ConstraintSurface::Region => {
            if dim != 2 {
                return Err(Error::Precondition("a region constraint needs a planar problem".into()));
            }
            let tab = el.tabulate(&GaussRule::new(k + 1));
            for cell in materials.hts_cells() {
                let h = mesh.cell_sizes(cell);
                let vol = h[0] * h[1];
                let scales = space.dof_scales(cell);
                for q in 0..tab.len() {
                    vals.copy_from_slice(tab.values(q));
                    curls.copy_from_slice(tab.curls(q));
                    scale_basis(2, &h, scales.iter().copied(), &mut vals, &mut curls);
                    for (i, &d) in space.cell_dofs(cell).iter().enumerate() {
                        row[d] += tab.weights[q] * vol * curls[i][2];
                    }
                }
            }
        }
        ConstraintSurface::Plane { axis, coord } => {
            if dim != 3 || axis > 2 {
                return Err(Error::Precondition("a plane constraint needs a 3D problem".into()));
            }
            let rule = GaussRule::new(k + 1);
            let tang = crate::mesh::in_plane_axes(axis);
            let mut area = 0.0;
            let mut extent_lo = [f64::INFINITY; 2];
            let mut extent_hi = [f64::NEG_INFINITY; 2];
            for cell in materials.hts_cells() {
                let b = mesh.cell_box(cell);
                let tol = 1e-9 * (b.hi[axis] - b.lo[axis]);
                if (b.lo[axis] - coord).abs() > tol {
                    if b.lo[axis] < coord - tol && b.hi[axis] > coord + tol {
                        return Err(Error::Precondition(format!(
                            "constraint plane {coord} cuts through cell {cell}"
                        )));
                    }
                    continue;
                }
                let h = mesh.cell_sizes(cell);
                let scales = space.dof_scales(cell);
                let fa = h[tang[0]] * h[tang[1]];
                area += fa;
                for (s, &t) in tang.iter().enumerate() {
                    extent_lo[s] = extent_lo[s].min(b.lo[t]);
                    extent_hi[s] = extent_hi[s].max(b.hi[t]);
                }
                for q1 in 0..rule.len() {
                    for q2 in 0..rule.len() {
                        let mut x = [0.0; 3];
                        x[tang[0]] = rule.points[q1];
                        x[tang[1]] = rule.points[q2];
                        let w = rule.weights[q1] * rule.weights[q2] * fa;
                        el.eval(&x, &mut vals, &mut curls);
                        scale_basis(3, &h, scales.iter().copied(), &mut vals, &mut curls);
                        for (i, &d) in space.cell_dofs(cell).iter().enumerate() {
                            row[d] += w * curls[i][axis];
                        }
                    }
                }
            }
            let full = (extent_hi[0] - extent_lo[0]) * (extent_hi[1] - extent_lo[1]);
            if !(area > 0.0) || (area - full).abs() > 1e-9 * full {
                return Err(Error::Precondition("constraint plane is not covered by whole cell faces".into()));
            }
        }
    }
    Ok(row)
}

/// Free-DoF mass matrix of a space.
pub fn assemble_mass(space: &EdgeSpace) -> CsrMatrix {
    let n = space.mesh().num_cells();
    let mats = MaterialMap::uniform(SubdomainMaterial::air(1.0), n);
    Problem::new(space.clone(), mats, None).map(|p| p.mass_matrix()).expect("consistent material map")
}

/// Free-DoF secant stiffness at field `h` (full coefficients).
pub fn assemble_stiffness(space: &EdgeSpace, materials: &MaterialMap, h: &[f64]) -> Result<CsrMatrix> {
    Ok(Problem::new(space.clone(), materials.clone(), None)?.stiffness_matrix(h))
}

/// Jacobian of a step as a bordered sparse system.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub matrix: CsrMatrix,
    /// Constraint border (row and column), if a current is imposed.
    pub border: Option<Vec<f64>>,
    pub rhs: Vec<f64>,
    pub symmetric: bool,
}

impl SparseSystem {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let nf = self.matrix.n();
        let mut y = self.matrix.mul(&x[..nf]);
        if let Some(c) = &self.border {
            let l = x[nf];
            for (yi, ci) in y.iter_mut().zip(c) {
                *yi += ci * l;
            }
            y.push(math::dot_slice(c, &x[..nf]));
        }
        y
    }
}

/// One time step `H^{n-1} → H^n` as a nonlinear system in `[H_free; λ']`.
pub struct TransientStep<'p> {
    problem: &'p mut Problem,
    h_prev: &'p [f64],
    dt: f64,
    theta: f64,
    i_app: f64,
    source: Option<&'p dyn Fn(&Vec3) -> Vec3>,
    jc: Vec<Vec<f64>>,
    /// Frobenius norm of the last factorized Jacobian.
    jac_norm: f64,
}

impl<'p> TransientStep<'p> {
    pub fn with_source(mut self, f: &'p dyn Fn(&Vec3) -> Vec3) -> Self {
        self.source = Some(f);
        self
    }

    pub fn problem(&self) -> &Problem {
        self.problem
    }

    /// Initial guess: the previous state's free values and a zero multiplier.
    pub fn initial_guess(&self) -> Vec<f64> {
        let mut x = self.problem.space.restrict(self.h_prev);
        if self.problem.has_constraint() {
            x.push(0.0);
        }
        x
    }

    fn scale(&self) -> f64 {
        MU_0 / self.dt
    }

    fn ensure_jc(&mut self, x: &[f64]) {
        if self.jc.is_empty() {
            let (h, _) = self.problem.expand_unknowns(x);
            self.jc = self.problem.frozen_jc(&h);
        }
    }

    fn theta_field(&self, h: &[f64]) -> Vec<f64> {
        h.iter().zip(self.h_prev).map(|(a, b)| self.theta * a + (1.0 - self.theta) * b).collect()
    }

    /// Residual on all unknowns.
    pub fn residual_vec(&mut self, x: &[f64]) -> Vec<f64> {
        self.ensure_jc(x);
        let p = &*self.problem;
        let (h, lam) = p.expand_unknowns(x);
        let ht = self.theta_field(&h);
        let s = self.scale();
        let n = p.space.element().n_dofs();
        let mut full = vec![0.0; p.space.n_dofs()];
        let mut mloc = vec![0.0; n * n];
        let mut kloc = vec![0.0; n * n];
        let mut vals = vec![[0.0; 3]; n];
        let mut curls = vec![[0.0; 3]; n];
        let mut rloc = vec![0.0; n];
        for cell in 0..p.space.mesh().num_cells() {
            let g = p.geom(cell);
            let dofs = p.space.cell_dofs(cell);
            let mat = p.materials.material(cell);
            p.local_mass(&g, &mut mloc);
            for i in 0..n {
                rloc[i] = (0..n).map(|j| mloc[i * n + j] * (h[dofs[j]] - self.h_prev[dofs[j]])).sum::<f64>() * s;
            }
            if let MaterialLaw::Constant(rho) = mat.law {
                p.local_curl(&g, rho, &mut kloc);
                for i in 0..n {
                    rloc[i] += (0..n).map(|j| kloc[i * n + j] * ht[dofs[j]]).sum::<f64>();
                }
            } else {
                for q in 0..p.tab_hts.len() {
                    p.curls_at(&g, q, &mut vals, &mut curls);
                    let mut j = [0.0; 3];
                    for (a, &d) in dofs.iter().enumerate() {
                        math::axpy(ht[d], &curls[a], &mut j);
                    }
                    let e = mat.response(&j, self.jc[cell][q]).e;
                    let w = p.tab_hts.weights[q] * g.vol;
                    for i in 0..n {
                        rloc[i] += w * math::dot(&e, &curls[i]);
                    }
                }
            }
            if let Some(f) = self.source {
                let b = p.space.mesh().cell_box(cell);
                for q in 0..p.tab_std.len() {
                    vals.copy_from_slice(p.tab_std.values(q));
                    curls.copy_from_slice(p.tab_std.curls(q));
                    scale_basis(p.space.dim(), &g.h, g.scales.iter().copied(), &mut vals, &mut curls);
                    let xr = p.tab_std.points[q];
                    let xp = [
                        b.lo[0] + xr[0] * g.h[0],
                        b.lo[1] + xr[1] * g.h[1],
                        b.lo[2] + xr[2] * g.h[2],
                    ];
                    let fv = f(&xp);
                    let w = p.tab_std.weights[q] * g.vol;
                    for i in 0..n {
                        rloc[i] -= w * math::dot(&fv, &vals[i]);
                    }
                }
            }
            for (i, &d) in dofs.iter().enumerate() {
                full[d] += rloc[i];
            }
        }
        let nf = p.space.num_free();
        let mut r = vec![0.0; p.num_unknowns()];
        p.fold(&full, &mut r[..nf]);
        if let Some(c) = &p.constraint {
            let mut cf = vec![0.0; nf];
            p.fold(c, &mut cf);
            for (ri, ci) in r.iter_mut().zip(&cf) {
                *ri += s * ci * lam;
            }
            r[nf] = s * (math::dot_slice(c, &h) - self.i_app);
        }
        r
    }

    /// Exact Jacobian at `x` with the current frozen `J_c`.
    pub fn jacobian(&mut self, x: &[f64]) -> SparseSystem {
        self.ensure_jc(x);
        let p = &*self.problem;
        let (h, _) = p.expand_unknowns(x);
        let ht = self.theta_field(&h);
        let s = self.scale();
        let n = p.space.element().n_dofs();
        let mut a = p.pattern.clone();
        let mut mloc = vec![0.0; n * n];
        let mut kloc = vec![0.0; n * n];
        let mut vals = vec![[0.0; 3]; n];
        let mut curls = vec![[0.0; 3]; n];
        for cell in 0..p.space.mesh().num_cells() {
            let g = p.geom(cell);
            let mat = p.materials.material(cell);
            p.local_mass(&g, &mut mloc);
            if let MaterialLaw::Constant(rho) = mat.law {
                p.local_curl(&g, rho * self.theta, &mut kloc);
            } else {
                kloc.iter_mut().for_each(|v| *v = 0.0);
                let dofs = p.space.cell_dofs(cell);
                let mut dc = vec![[0.0; 3]; n];
                for q in 0..p.tab_hts.len() {
                    p.curls_at(&g, q, &mut vals, &mut curls);
                    let mut j = [0.0; 3];
                    for (i, &d) in dofs.iter().enumerate() {
                        math::axpy(ht[d], &curls[i], &mut j);
                    }
                    let de = mat.response(&j, self.jc[cell][q]).de_dj;
                    let w = p.tab_hts.weights[q] * g.vol * self.theta;
                    for (i, c) in curls.iter().enumerate() {
                        dc[i] = [
                            de[0][0] * c[0] + de[0][1] * c[1] + de[0][2] * c[2],
                            de[1][0] * c[0] + de[1][1] * c[1] + de[1][2] * c[2],
                            de[2][0] * c[0] + de[2][1] * c[1] + de[2][2] * c[2],
                        ];
                    }
                    for i in 0..n {
                        for jj in 0..n {
                            kloc[i * n + jj] += w * math::dot(&curls[i], &dc[jj]);
                        }
                    }
                }
            }
            for (m, k) in mloc.iter_mut().zip(&kloc) {
                *m = s * *m + k;
            }
            p.scatter_local(cell, &mloc, &mut a);
        }
        let nf = p.space.num_free();
        let border = p.constraint.as_ref().map(|c| {
            let mut cf = vec![0.0; nf];
            p.fold(c, &mut cf);
            cf.iter_mut().for_each(|v| *v *= s);
            cf
        });
        let symmetric = a.asymmetry() < 1e-12;
        SparseSystem { matrix: a, border, rhs: Vec::new(), symmetric }
    }
}

impl NonlinearSystem for TransientStep<'_> {
    fn dim(&self) -> usize {
        self.problem.num_unknowns()
    }

    fn begin_iteration(&mut self, x: &[f64]) -> Result<()> {
        self.jc.clear();
        self.ensure_jc(x);
        Ok(())
    }

    fn residual(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.residual_vec(x))
    }

    fn newton_direction(&mut self, x: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        let sys = self.jacobian(x);
        let nf = sys.matrix.n();
        let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        self.jac_norm = math::sqrt(sq(sys.matrix.values()) + 2.0 * sys.border.as_deref().map_or(0.0, sq));
        let neg: Vec<f64> = r[..nf].iter().map(|v| -v).collect();
        let solver = &mut self.problem.solver;
        solver.factorize(&sys.matrix, sys.border.as_deref())?;
        let r_l = if sys.border.is_some() { -r[nf] } else { 0.0 };
        let (mut dx, dl) = solver.solve(&neg, r_l)?;
        if sys.border.is_some() {
            dx.push(dl);
        }
        Ok(dx)
    }

    fn residual_floor(&self, x: &[f64]) -> f64 {
        f64::EPSILON * self.jac_norm * math::norm2(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::materials::PowerLawModel;
    use crate::mesh::{Aabb, RefinementFlags, TreeMesh};
    use crate::space::build_space;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(n: usize, size: f64) -> TreeMesh {
        TreeMesh::new_uniform(&Aabb::new([0.0; 3], [size, size, 0.0]), 2, &[n, n]).unwrap()
    }

    fn graded_2d() -> TreeMesh {
        let m = square(4, 1.0);
        let marks = (0..m.num_cells()).map(|i| m.cell_center(i)[0] < 0.5 && m.cell_center(i)[1] < 0.5).collect();
        let m = m.refine_and_balance(&RefinementFlags::from_marks(marks)).unwrap();
        let marks = (0..m.num_cells()).map(|i| m.cell_center(i)[0] < 0.2 && m.cell_center(i)[1] < 0.2).collect();
        m.refine_and_balance(&RefinementFlags::from_marks(marks)).unwrap()
    }

    /// Materials: superconductor in the centered box, air elsewhere.
    fn hts_map(mesh: &TreeMesh, lo: f64, hi: f64, power: PowerLawModel) -> MaterialMap {
        let mats = vec![SubdomainMaterial::air(1e-2), SubdomainMaterial::power_law(power)];
        let tags = (0..mesh.num_cells())
            .map(|c| {
                let x = mesh.cell_center(c);
                let inside = (0..mesh.dim()).all(|a| x[a] > lo && x[a] < hi);
                usize::from(inside)
            })
            .collect();
        MaterialMap::new(mats, tags).unwrap()
    }

    fn no_space_full(space: &EdgeSpace) -> Vec<f64> {
        vec![0.0; space.n_dofs()]
    }

    #[test]
    fn unit_square_local_mass_and_curl() {
        let space = build_space(square(1, 1.0), 1).unwrap();
        let p = Problem::new(space, MaterialMap::uniform(SubdomainMaterial::air(1.0), 1), None).unwrap();
        let g = p.geom(0);
        let mut m = vec![0.0; 16];
        p.local_mass(&g, &mut m);
        let expect = [
            [1.0 / 3.0, 1.0 / 6.0, 0.0, 0.0],
            [1.0 / 6.0, 1.0 / 3.0, 0.0, 0.0],
            [0.0, 0.0, 1.0 / 3.0, 1.0 / 6.0],
            [0.0, 0.0, 1.0 / 6.0, 1.0 / 3.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!((m[i * 4 + j] - expect[i][j]).abs() < 1e-14);
            }
        }
        let mut k = vec![0.0; 16];
        p.local_curl(&g, 2.5, &mut k);
        let signs = [1.0, -1.0, -1.0, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                assert!((k[i * 4 + j] - 2.5 * signs[i] * signs[j]).abs() < 1e-13);
            }
        }
        // doubling the cell multiplies mass entries by 4
        let big = build_space(square(1, 2.0), 1).unwrap();
        let pb = Problem::new(big, MaterialMap::uniform(SubdomainMaterial::air(1.0), 1), None).unwrap();
        let mut mb = vec![0.0; 16];
        pb.local_mass(&pb.geom(0), &mut mb);
        for i in 0..16 {
            assert!((mb[i] - 4.0 * m[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn mass_is_spd_and_stiffness_kills_gradients() {
        let space = build_space(square(4, 1.0), 1).unwrap();
        let m = assemble_mass(&space);
        let d = DMatrix::from_row_slice(m.n(), m.n(), &m.to_dense());
        let eig = d.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() > 0.0);
        assert!(m.asymmetry() < 1e-14);
        let mats = MaterialMap::uniform(SubdomainMaterial::air(3.0), 16);
        let k = assemble_stiffness(&space, &mats, &no_space_full(&space)).unwrap();
        // discrete gradient of a nodal function vanishing on the boundary
        // lowest-order moments of a nodal gradient are endpoint differences over the length
        let nodal = |p: &Vec3| p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]);
        let mesh = space.mesh();
        let mut g = vec![0.0; space.n_dofs()];
        for e in 0..mesh.num_edges() {
            let (a, b) = mesh.edge_endpoints(e);
            let len = math::norm(&math::sub(&b, &a));
            g[e] = (nodal(&b) - nodal(&a)) / len;
        }
        let kg = k.mul(&space.restrict(&g));
        assert!(math::norm2(&kg) < 1e-12);
        // a constant field with matching boundary data is a steady state
        let mut space = space;
        space.apply_dirichlet(|_| [1.0, 0.0, 0.0]);
        let prev = space.interpolate(|_| [1.0, 0.0, 0.0]);
        let mut p = Problem::new(space, mats, None).unwrap();
        let mut st = p.step(&prev, 1.0, 1.0, 0.0).unwrap();
        let x = st.initial_guess();
        assert!(math::norm2(&st.residual_vec(&x)) < 1e-14);
    }

    #[test]
    fn constraint_row_measures_net_current() {
        let space = build_space(graded_2d(), 2).unwrap();
        let mats = hts_map(space.mesh(), 0.25, 0.75, PowerLawModel::new(1e-4, 1e8, 24.0).unwrap());
        let c = assemble_constraint_row(&space, &mats, ConstraintSurface::Region).unwrap();
        let rot = space.interpolate(|p| [-p[1] / 2.0, p[0] / 2.0, 0.0]);
        assert!((math::dot_slice(&c, &rot) - 0.25).abs() < 1e-12);
        let cst = space.interpolate(|_| [0.3, -1.0, 0.0]);
        assert!(math::dot_slice(&c, &cst).abs() < 1e-12);
    }

    #[test]
    fn plane_constraint_in_3d() {
        let mesh = TreeMesh::new_uniform(&Aabb::new([0.0; 3], [1.0; 3]), 3, &[4, 4, 4]).unwrap();
        let space = build_space(mesh, 1).unwrap();
        let mats = hts_map(space.mesh(), 0.25, 0.75, PowerLawModel::new(1e-4, 1e8, 24.0).unwrap());
        let plane = ConstraintSurface::Plane { axis: 2, coord: 0.5 };
        let c = assemble_constraint_row(&space, &mats, plane).unwrap();
        // H = (-y/2, x/2, 0) has unit z-curl through the 0.5 x 0.5 section
        let rot = space.interpolate(|p| [-p[1] / 2.0, p[0] / 2.0, 0.0]);
        assert!((math::dot_slice(&c, &rot) - 0.25).abs() < 1e-12);
        let bad = ConstraintSurface::Plane { axis: 2, coord: 0.4 };
        assert!(assemble_constraint_row(&space, &mats, bad).is_err());
    }

    #[test]
    fn zero_state_has_zero_residual() {
        let space = build_space(graded_2d(), 1).unwrap();
        let mats = hts_map(space.mesh(), 0.25, 0.75, PowerLawModel::new(1e-4, 1e8, 24.0).unwrap());
        let mut p = Problem::new(space, mats, Some(ConstraintSurface::Region)).unwrap();
        let prev = vec![0.0; p.space().n_dofs()];
        let mut st = p.step(&prev, 1e-3, 1.0, 0.0).unwrap();
        let x = st.initial_guess();
        assert!(math::norm2(&st.residual_vec(&x)) == 0.0);
    }

    #[test]
    fn linear_problem_solution_zeroes_residual() {
        let mut space = build_space(graded_2d(), 2).unwrap();
        space.apply_dirichlet(|p| [p[1], -0.5 * p[0], 0.0]);
        let mats = MaterialMap::uniform(SubdomainMaterial::air(0.7), space.mesh().num_cells());
        let mut p = Problem::new(space, mats, None).unwrap();
        let prev: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            (0..p.space().n_dofs()).map(|_| rng.random::<f64>()).collect()
        };
        let mut st = p.step(&prev, 1e-6, 1.0, 0.0).unwrap();
        let x0 = vec![0.0; st.dim()];
        let r0 = st.residual_vec(&x0);
        let sys = st.jacobian(&x0);
        // dense oracle on the eliminated system
        let n = sys.matrix.n();
        let a = DMatrix::from_row_slice(n, n, &sys.matrix.to_dense());
        let sol = a.lu().solve(&DVector::from_iterator(n, r0.iter().map(|v| -v))).unwrap();
        let x: Vec<f64> = sol.iter().copied().collect();
        let r = st.residual_vec(&x);
        assert!(math::norm2(&r) < 1e-9 * math::norm2(&r0));
        // the Jacobian of a linear problem is μ0/Δt M + K
        let mass = p.mass_matrix();
        let stiff = p.stiffness_matrix(&prev);
        let s = MU_0 / 1e-6;
        let mut st = p.step(&prev, 1e-6, 1.0, 0.0).unwrap();
        let jac = st.jacobian(&x0);
        for i in 0..n {
            let (cols, vals) = jac.matrix.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                let e = s * mass.get(i, j) + stiff.get(i, j);
                assert!((v - e).abs() <= 1e-12 * (1.0 + e.abs()));
            }
        }
    }

    #[test]
    fn elimination_matches_full_constrained_solve() {
        // full system with hanging and Dirichlet rows kept as explicit constraints
        let mut space = build_space(graded_2d(), 1).unwrap();
        space.apply_dirichlet(|p| [1.0 + p[1], p[0] * p[0], 0.0]);
        let mats = MaterialMap::uniform(SubdomainMaterial::air(2.0), space.mesh().num_cells());
        let mut p = Problem::new(space, mats, None).unwrap();
        let prev = vec![0.0; p.space().n_dofs()];
        let dt = 1e-7;
        let mut st = p.step(&prev, dt, 1.0, 0.0).unwrap();
        let x0 = vec![0.0; st.dim()];
        let r0 = st.residual_vec(&x0);
        let sys = st.jacobian(&x0);
        let n = sys.matrix.n();
        let a = DMatrix::from_row_slice(n, n, &sys.matrix.to_dense());
        let xf = a.lu().solve(&DVector::from_iterator(n, r0.iter().map(|v| -v))).unwrap();
        let h_elim = p.space().expand(xf.as_slice());

        // full-space oracle: unconstrained operator with constraint rows appended via multipliers
        let sp = p.space();
        let nd = sp.n_dofs();
        let mut full = DMatrix::<f64>::zeros(nd, nd);
        let mesh = sp.mesh();
        let nl = sp.element().n_dofs();
        let mut ml = vec![0.0; nl * nl];
        let mut kl = vec![0.0; nl * nl];
        for cell in 0..mesh.num_cells() {
            let g = p.geom(cell);
            p.local_mass(&g, &mut ml);
            p.local_curl(&g, 2.0, &mut kl);
            let d = sp.cell_dofs(cell);
            for i in 0..nl {
                for j in 0..nl {
                    full[(d[i], d[j])] += MU_0 / dt * ml[i * nl + j] + kl[i * nl + j];
                }
            }
        }
        let cons = sp.constraints();
        let fixed: Vec<usize> = (0..nd).filter(|&d| cons.free_index(d).is_none()).collect();
        let m = fixed.len();
        let mut big = DMatrix::<f64>::zeros(nd + m, nd + m);
        big.view_mut((0, 0), (nd, nd)).copy_from(&full);
        let mut rhs = DVector::<f64>::zeros(nd + m);
        for (r, &d) in fixed.iter().enumerate() {
            // h_d - Σ w h_masters = offset, with masters taken from the unclosed relation
            let mut row = vec![(d, 1.0)];
            match cons.kind(d) {
                crate::space::DofKind::Hanging => {
                    for &(mm, w) in cons.hanging_masters(d).unwrap() {
                        row.push((mm, -w));
                    }
                    rhs[nd + r] = 0.0;
                }
                _ => rhs[nd + r] = sp.dirichlet_values()[d],
            }
            for (c, w) in row {
                big[(nd + r, c)] += w;
                big[(c, nd + r)] += w;
            }
        }
        let sol = big.lu().solve(&rhs).unwrap();
        for d in 0..nd {
            assert!((sol[d] - h_elim[d]).abs() < 1e-9 * (1.0 + h_elim[d].abs()), "dof {d}");
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scale = 1e-3;
        let mesh = TreeMesh::from_roots(
            crate::mesh::RootGrid::from_breaks(
                2,
                vec![vec![0.0, scale, 2.0 * scale, 3.0 * scale, 4.0 * scale]; 2],
            )
            .unwrap(),
        )
        .unwrap()
        .refine_and_balance(&RefinementFlags::from_marks(
            (0..16).map(|i| i % 3 == 0).collect(),
        ))
        .unwrap();
        let space = build_space(mesh, 2).unwrap();
        let mats = hts_map(space.mesh(), 0.9 * scale, 3.1 * scale, PowerLawModel::new(1e-4, 1e8, 24.0).unwrap());
        let mut p = Problem::new(space, mats, Some(ConstraintSurface::Region)).unwrap();
        let nd = p.space().n_dofs();
        let prev: Vec<f64> = (0..nd).map(|_| (rng.random::<f64>() - 0.5) * 1e5).collect();
        let mut st = p.step(&prev, 1e-4, 1.0, 50.0).unwrap();
        let nu = st.dim();
        let x: Vec<f64> = (0..nu).map(|_| (rng.random::<f64>() - 0.5) * 1e5).collect();
        st.begin_iteration(&x).unwrap();
        let sys = st.jacobian(&x);
        assert!(sys.symmetric);
        for _ in 0..5 {
            let d: Vec<f64> = (0..nu).map(|_| rng.random::<f64>() - 0.5).collect();
            let eps = 1e-7 * math::norm2(&x) / math::norm2(&d);
            let xp: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + eps * b).collect();
            let xm: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - eps * b).collect();
            let rp = st.residual_vec(&xp);
            let rm = st.residual_vec(&xm);
            let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
            let jd = sys.apply(&d);
            let err: Vec<f64> = fd.iter().zip(&jd).map(|(a, b)| a - b).collect();
            assert!(math::norm2(&err) < 1e-5 * math::norm2(&jd), "{}", math::norm2(&err) / math::norm2(&jd));
        }
    }
}
