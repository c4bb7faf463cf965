//! Global Nédélec spaces on a balanced tree mesh.
//!
//! Global DoFs are numbered edge blocks first, then face blocks (3D), then
//! cell interiors. Every DoF is free, Dirichlet (on a boundary entity) or
//! hanging (on a hanging entity). Hanging DoFs are expressed through the
//! moments, on the fine entity, of the coarse owner cell's basis functions;
//! the closure is then expanded recursively so that every DoF is an affine
//! combination of free DoFs plus a Dirichlet offset.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::{ReferenceElement, Span};
use crate::mesh::{EntityKind, TreeMesh};
use crate::{math, Error, Result, Vec3};

/// Constraint weights below this magnitude are dropped.
const WEIGHT_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofKind {
    Free,
    Dirichlet,
    Hanging,
}

/// Affine expansion of every global DoF over free DoFs and Dirichlet values.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    kinds: Vec<DofKind>,
    free_index: Vec<usize>,
    free_dofs: Vec<usize>,
    /// Direct masters of each hanging DoF, before closure.
    hanging: BTreeMap<usize, Vec<(usize, f64)>>,
    exp_ptr: Vec<usize>,
    exp_free: Vec<usize>,
    exp_w: Vec<f64>,
    dir_ptr: Vec<usize>,
    dir_dof: Vec<usize>,
    dir_w: Vec<f64>,
    dirichlet_values: Vec<f64>,
}

impl ConstraintSet {
    pub fn kind(&self, dof: usize) -> DofKind {
        self.kinds[dof]
    }

    pub fn num_free(&self) -> usize {
        self.free_dofs.len()
    }

    pub fn num_dirichlet(&self) -> usize {
        self.kinds.iter().filter(|k| **k == DofKind::Dirichlet).count()
    }

    pub fn num_hanging(&self) -> usize {
        self.hanging.len()
    }

    /// Global DoF of free index `i`.
    pub fn free_dof(&self, i: usize) -> usize {
        self.free_dofs[i]
    }

    /// Free index of a free global DoF.
    pub fn free_index(&self, dof: usize) -> Option<usize> {
        (self.kinds[dof] == DofKind::Free).then(|| self.free_index[dof])
    }

    /// Unclosed masters of a hanging DoF.
    pub fn hanging_masters(&self, dof: usize) -> Option<&[(usize, f64)]> {
        self.hanging.get(&dof).map(|v| v.as_slice())
    }

    /// Closed expansion of a global DoF: `(free index, weight)` pairs.
    pub fn expansion(&self, dof: usize) -> (&[usize], &[f64]) {
        let r = self.exp_ptr[dof]..self.exp_ptr[dof + 1];
        (&self.exp_free[r.clone()], &self.exp_w[r])
    }

    /// Inhomogeneous part of a global DoF from the current Dirichlet data.
    pub fn offset(&self, dof: usize) -> f64 {
        let r = self.dir_ptr[dof]..self.dir_ptr[dof + 1];
        self.dir_dof[r.clone()].iter().zip(&self.dir_w[r]).map(|(&d, &w)| w * self.dirichlet_values[d]).sum()
    }
}

/// Order-`k` edge-element space over an owned mesh.
#[derive(Debug, Clone)]
pub struct EdgeSpace {
    mesh: TreeMesh,
    element: ReferenceElement,
    n_dofs: usize,
    cell_dofs: Vec<usize>,
    edge_start: usize,
    face_start: usize,
    interior_start: usize,
    constraints: ConstraintSet,
}

pub fn build_space(mesh: TreeMesh, k: usize) -> Result<EdgeSpace> {
    EdgeSpace::new(mesh, k)
}

impl EdgeSpace {
    pub fn new(mesh: TreeMesh, k: usize) -> Result<Self> {
        if !mesh.is_balanced() {
            return Err(Error::Precondition("mesh is not 2:1 balanced".into()));
        }
        let dim = mesh.dim();
        let element = ReferenceElement::new(dim, k)?;
        let per_face = if dim == 3 { element.face_dofs(0).len() } else { 0 };
        let per_interior = element.interior_dofs().len();
        let edge_start = 0;
        let face_start = mesh.num_edges() * k;
        let interior_start = face_start + mesh.num_faces() * per_face;
        let n_dofs = interior_start + mesh.num_cells() * per_interior;

        let nloc = element.n_dofs();
        let mut cell_dofs = Vec::with_capacity(mesh.num_cells() * nloc);
        for c in 0..mesh.num_cells() {
            for (le, &e) in mesh.cell_edges(c).iter().enumerate() {
                debug_assert_eq!(element.edge_dofs(le).len(), k);
                for m in 0..k {
                    cell_dofs.push(edge_start + e * k + m);
                }
            }
            for &f in mesh.cell_faces(c) {
                for m in 0..per_face {
                    cell_dofs.push(face_start + f * per_face + m);
                }
            }
            for m in 0..per_interior {
                cell_dofs.push(interior_start + c * per_interior + m);
            }
        }

        let mut space = EdgeSpace {
            mesh,
            element,
            n_dofs,
            cell_dofs,
            edge_start,
            face_start,
            interior_start,
            constraints: ConstraintSet {
                kinds: Vec::new(),
                free_index: Vec::new(),
                free_dofs: Vec::new(),
                hanging: BTreeMap::new(),
                exp_ptr: Vec::new(),
                exp_free: Vec::new(),
                exp_w: Vec::new(),
                dir_ptr: Vec::new(),
                dir_dof: Vec::new(),
                dir_w: Vec::new(),
                dirichlet_values: Vec::new(),
            },
        };
        space.build_constraints()?;
        Ok(space)
    }

    pub fn mesh(&self) -> &TreeMesh {
        &self.mesh
    }

    pub fn element(&self) -> &ReferenceElement {
        &self.element
    }

    pub fn order(&self) -> usize {
        self.element.order()
    }

    pub fn dim(&self) -> usize {
        self.mesh.dim()
    }

    /// Total number of global DoFs, constrained ones included.
    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    pub fn num_free(&self) -> usize {
        self.constraints.num_free()
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn cell_dofs(&self, cell: usize) -> &[usize] {
        let n = self.element.n_dofs();
        &self.cell_dofs[cell * n..(cell + 1) * n]
    }

    pub(crate) fn edge_dof_range(&self, edge: usize) -> core::ops::Range<usize> {
        let k = self.order();
        self.edge_start + edge * k..self.edge_start + (edge + 1) * k
    }

    pub(crate) fn face_dof_range(&self, face: usize) -> core::ops::Range<usize> {
        let per = self.element.face_dofs(0).len();
        self.face_start + face * per..self.face_start + (face + 1) * per
    }

    pub(crate) fn interior_dof_range(&self, cell: usize) -> core::ops::Range<usize> {
        let per = self.element.interior_dofs().len();
        self.interior_start + cell * per..self.interior_start + (cell + 1) * per
    }

    /// Scaling `s_j` of each local basis function of a cell: the cell size
    /// along the DoF's field component.
    pub fn dof_scales(&self, cell: usize) -> Vec<f64> {
        let h = self.mesh.cell_sizes(cell);
        self.element.dofs().iter().map(|d| h[d.axis]).collect()
    }

    fn build_constraints(&mut self) -> Result<()> {
        let mesh = &self.mesh;
        let n = self.n_dofs;
        let mut kinds = vec![DofKind::Free; n];
        for e in 0..mesh.num_edges() {
            if mesh.is_edge_on_boundary(e) {
                for d in self.edge_dof_range(e) {
                    kinds[d] = DofKind::Dirichlet;
                }
            }
        }
        for f in 0..mesh.num_faces() {
            if mesh.is_face_on_boundary(f) {
                for d in self.face_dof_range(f) {
                    kinds[d] = DofKind::Dirichlet;
                }
            }
        }

        let nloc = self.element.n_dofs();
        let mut hanging = BTreeMap::new();
        for h in mesh.hanging_entities() {
            let owner_cell = h.owner_cell;
            let (dofs, span) = match h.entity.kind {
                EntityKind::Edge => {
                    let (p, q) = mesh.edge_endpoints(h.entity.id);
                    (self.edge_dof_range(h.entity.id), Span { lo: p, hi: q })
                }
                EntityKind::Face => {
                    let b = mesh.face_box(h.entity.id);
                    (self.face_dof_range(h.entity.id), Span { lo: b.lo, hi: b.hi })
                }
            };
            let span = Span {
                lo: mesh.reference_coords(owner_cell, &span.lo),
                hi: mesh.reference_coords(owner_cell, &span.hi),
            };
            let scales = self.dof_scales(owner_cell);
            let sizes = mesh.cell_sizes(owner_cell);
            let owner_dofs = self.cell_dofs(owner_cell);
            // moments on the fine entity of every coarse basis function
            let (axes, mom) = self.element.basis_moments_on(&span);
            for (i, dof) in dofs.enumerate() {
                let mut masters = Vec::new();
                for j in 0..nloc {
                    let w = mom[i * nloc + j] * scales[j] / sizes[axes[i]];
                    if w.abs() > WEIGHT_CUTOFF {
                        masters.push((owner_dofs[j], w));
                    }
                }
                kinds[dof] = DofKind::Hanging;
                hanging.insert(dof, masters);
            }
        }

        let mut free_index = vec![usize::MAX; n];
        let mut free_dofs = Vec::new();
        for (d, k) in kinds.iter().enumerate() {
            if *k == DofKind::Free {
                free_index[d] = free_dofs.len();
                free_dofs.push(d);
            }
        }

        // recursive closure, memoized; free and Dirichlet weights
        type Closure = (BTreeMap<usize, f64>, BTreeMap<usize, f64>);
        let mut closed: Vec<Option<Closure>> = vec![None; n];
        fn close(
            d: usize,
            kinds: &[DofKind],
            free_index: &[usize],
            hanging: &BTreeMap<usize, Vec<(usize, f64)>>,
            closed: &mut Vec<Option<Closure>>,
            depth: usize,
        ) -> Result<Closure> {
            if let Some(c) = &closed[d] {
                return Ok(c.clone());
            }
            if depth > 64 {
                return Err(Error::Precondition("cyclic hanging constraints".into()));
            }
            let mut fr = BTreeMap::new();
            let mut di = BTreeMap::new();
            match kinds[d] {
                DofKind::Free => {
                    fr.insert(free_index[d], 1.0);
                }
                DofKind::Dirichlet => {
                    di.insert(d, 1.0);
                }
                DofKind::Hanging => {
                    for &(m, w) in &hanging[&d] {
                        let (mf, md) = close(m, kinds, free_index, hanging, closed, depth + 1)?;
                        for (k, v) in mf {
                            *fr.entry(k).or_insert(0.0) += w * v;
                        }
                        for (k, v) in md {
                            *di.entry(k).or_insert(0.0) += w * v;
                        }
                    }
                    fr.retain(|_, v: &mut f64| v.abs() > WEIGHT_CUTOFF);
                    di.retain(|_, v: &mut f64| v.abs() > WEIGHT_CUTOFF);
                }
            }
            closed[d] = Some((fr.clone(), di.clone()));
            Ok((fr, di))
        }

        let mut exp_ptr = vec![0];
        let mut exp_free = Vec::new();
        let mut exp_w = Vec::new();
        let mut dir_ptr = vec![0];
        let mut dir_dof = Vec::new();
        let mut dir_w = Vec::new();
        for d in 0..n {
            let (fr, di) = close(d, &kinds, &free_index, &hanging, &mut closed, 0)?;
            for (k, v) in fr {
                exp_free.push(k);
                exp_w.push(v);
            }
            for (k, v) in di {
                dir_dof.push(k);
                dir_w.push(v);
            }
            exp_ptr.push(exp_free.len());
            dir_ptr.push(dir_dof.len());
        }
        self.constraints = ConstraintSet {
            kinds,
            free_index,
            free_dofs,
            hanging,
            exp_ptr,
            exp_free,
            exp_w,
            dir_ptr,
            dir_dof,
            dir_w,
            dirichlet_values: vec![0.0; n],
        };
        Ok(())
    }

    /// Moments of `g` for every global DoF (physical, normalized).
    pub fn interpolate(&self, g: impl Fn(&Vec3) -> Vec3) -> Vec<f64> {
        let mesh = &self.mesh;
        let mut out = vec![0.0; self.n_dofs];
        for e in 0..mesh.num_edges() {
            let (p, q) = mesh.edge_endpoints(e);
            let m = self.element.moments_on(&Span { lo: p, hi: q }, &g);
            out[self.edge_dof_range(e)].copy_from_slice(&m);
        }
        for f in 0..mesh.num_faces() {
            let b = mesh.face_box(f);
            let m = self.element.moments_on(&Span { lo: b.lo, hi: b.hi }, &g);
            out[self.face_dof_range(f)].copy_from_slice(&m);
        }
        if !self.element.interior_dofs().is_empty() {
            for c in 0..mesh.num_cells() {
                let b = mesh.cell_box(c);
                let m = self.element.moments_on(&Span { lo: b.lo, hi: b.hi }, &g);
                out[self.interior_dof_range(c)].copy_from_slice(&m);
            }
        }
        out
    }

    /// Set Dirichlet values to the moments of the boundary datum `g`.
    pub fn apply_dirichlet(&mut self, g: impl Fn(&Vec3) -> Vec3) {
        let mesh = &self.mesh;
        let mut vals = vec![0.0; self.n_dofs];
        for e in 0..mesh.num_edges() {
            if mesh.is_edge_on_boundary(e) {
                let (p, q) = mesh.edge_endpoints(e);
                let m = self.element.moments_on(&Span { lo: p, hi: q }, &g);
                vals[self.edge_dof_range(e)].copy_from_slice(&m);
            }
        }
        for f in 0..mesh.num_faces() {
            if mesh.is_face_on_boundary(f) {
                let b = mesh.face_box(f);
                let m = self.element.moments_on(&Span { lo: b.lo, hi: b.hi }, &g);
                vals[self.face_dof_range(f)].copy_from_slice(&m);
            }
        }
        for (d, v) in vals.iter_mut().enumerate() {
            if self.constraints.kinds[d] != DofKind::Dirichlet {
                *v = 0.0;
            }
        }
        self.constraints.dirichlet_values = vals;
    }

    pub fn clear_dirichlet(&mut self) {
        self.constraints.dirichlet_values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn dirichlet_values(&self) -> &[f64] {
        &self.constraints.dirichlet_values
    }

    pub fn set_dirichlet_values(&mut self, values: Vec<f64>) {
        assert_eq!(values.len(), self.n_dofs);
        self.constraints.dirichlet_values = values;
    }

    /// Full coefficient vector from free values and the current Dirichlet data.
    pub fn expand(&self, free: &[f64]) -> Vec<f64> {
        let c = &self.constraints;
        (0..self.n_dofs)
            .map(|d| {
                let (idx, w) = c.expansion(d);
                idx.iter().zip(w).map(|(&i, &w)| w * free[i]).sum::<f64>() + c.offset(d)
            })
            .collect()
    }

    /// Free part of a full coefficient vector.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.constraints.free_dofs.iter().map(|&d| full[d]).collect()
    }

    /// Physical basis values and curls of a cell at reference point `x`.
    pub fn physical_basis(&self, cell: usize, x: &Vec3, values: &mut [Vec3], curls: &mut [Vec3]) {
        self.element.eval(x, values, curls);
        let h = self.mesh.cell_sizes(cell);
        scale_basis(self.dim(), &h, self.element.dofs().iter().map(|d| h[d.axis]), values, curls);
    }

    /// Field and curl of a full coefficient vector at reference point `x` of `cell`.
    pub fn eval_in_cell(&self, coeffs: &[f64], cell: usize, x: &Vec3) -> (Vec3, Vec3) {
        let n = self.element.n_dofs();
        let mut v = vec![[0.0; 3]; n];
        let mut c = vec![[0.0; 3]; n];
        self.physical_basis(cell, x, &mut v, &mut c);
        let mut val = [0.0; 3];
        let mut curl = [0.0; 3];
        for (j, &d) in self.cell_dofs(cell).iter().enumerate() {
            math::axpy(coeffs[d], &v[j], &mut val);
            math::axpy(coeffs[d], &c[j], &mut curl);
        }
        (val, curl)
    }
}

/// Map reference basis values/curls to a box cell with sizes `h`, given the
/// per-function scaling `s_j`.
pub fn scale_basis(
    dim: usize,
    h: &Vec3,
    scales: impl Iterator<Item = f64>,
    values: &mut [Vec3],
    curls: &mut [Vec3],
) {
    let vol: f64 = (0..dim).map(|a| h[a]).product();
    for ((v, c), s) in values.iter_mut().zip(curls.iter_mut()).zip(scales) {
        for a in 0..dim {
            v[a] *= s / h[a];
        }
        if dim == 2 {
            c[2] *= s / vol;
        } else {
            for a in 0..3 {
                c[a] *= s * h[a] / vol;
            }
        }
    }
}

/// A field in an [`EdgeSpace`], carried as a full coefficient vector.
#[derive(Debug, Clone)]
pub struct FEFunction<'s> {
    space: &'s EdgeSpace,
    coeffs: Vec<f64>,
}

impl<'s> FEFunction<'s> {
    pub fn from_free(space: &'s EdgeSpace, free: &[f64]) -> Self {
        FEFunction { space, coeffs: space.expand(free) }
    }

    pub fn from_full(space: &'s EdgeSpace, coeffs: Vec<f64>) -> Self {
        assert_eq!(coeffs.len(), space.n_dofs());
        FEFunction { space, coeffs }
    }

    /// Interpolant of `g` in the space: free moments, constrained DoFs expanded.
    pub fn interpolate(space: &'s EdgeSpace, g: impl Fn(&Vec3) -> Vec3) -> Self {
        let all = space.interpolate(g);
        Self::from_free(space, &space.restrict(&all))
    }

    pub fn space(&self) -> &'s EdgeSpace {
        self.space
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn free_coeffs(&self) -> Vec<f64> {
        self.space.restrict(&self.coeffs)
    }

    pub fn evaluate(&self, p: &Vec3) -> Result<Vec3> {
        let (cell, x) = self.space.mesh().locate(p)?;
        Ok(self.space.eval_in_cell(&self.coeffs, cell, &x).0)
    }

    /// Curl at `p`; in 2D the scalar curl sits in component 2.
    pub fn evaluate_curl(&self, p: &Vec3) -> Result<Vec3> {
        let (cell, x) = self.space.mesh().locate(p)?;
        Ok(self.space.eval_in_cell(&self.coeffs, cell, &x).1)
    }

    /// Field and curl evaluated with the basis of a given cell.
    pub fn evaluate_in_cell(&self, cell: usize, p: &Vec3) -> (Vec3, Vec3) {
        let x = self.space.mesh().reference_coords(cell, p);
        self.space.eval_in_cell(&self.coeffs, cell, &x)
    }
}

/// Largest tangential jump of a field over all interior cell interfaces,
/// sampled at a tensor grid of `samples` points per interface.
pub fn max_tangential_jump(f: &FEFunction, samples: usize) -> f64 {
    let space = f.space();
    let mesh = space.mesh();
    let dim = mesh.dim();
    let mut worst: f64 = 0.0;
    let ts: Vec<f64> = (0..samples).map(|i| (i as f64 + 0.5) / samples as f64).collect();
    for cell in 0..mesh.num_cells() {
        let b = mesh.cell_box(cell);
        for normal in 0..dim {
            // interface on the "+" side of the cell only; the neighbor is found by probing
            let tang: Vec<usize> = (0..dim).filter(|&a| a != normal).collect();
            let npts = if dim == 2 { samples } else { samples * samples };
            for s in 0..npts {
                let mut p = b.lo;
                p[normal] = b.hi[normal];
                p[tang[0]] = b.lo[tang[0]] + ts[s % samples] * (b.hi[tang[0]] - b.lo[tang[0]]);
                if dim == 3 {
                    p[tang[1]] = b.lo[tang[1]] + ts[s / samples] * (b.hi[tang[1]] - b.lo[tang[1]]);
                }
                let mut probe = p;
                probe[normal] += 1e-9 * (b.hi[normal] - b.lo[normal]);
                let Ok((other, _)) = mesh.locate(&probe) else { continue };
                if other == cell || probe[normal] > mesh.domain().hi[normal] {
                    continue;
                }
                let (u, _) = f.evaluate_in_cell(cell, &p);
                let (v, _) = f.evaluate_in_cell(other, &p);
                for &t in &tang {
                    worst = worst.max((u[t] - v[t]).abs());
                }
            }
        }
    }
    worst
}
