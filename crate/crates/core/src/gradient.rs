//! Gradients of the continuous multilinear (nodal) space on the same tree
//! mesh. They lie in the kernel of the curl and are used to measure and
//! restore weak solenoidality of an edge-element field.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Span;
use crate::linalg::CholeskySolver;
use crate::mesh::TreeMesh;
use crate::quadrature::GaussRule;
use crate::space::{scale_basis, EdgeSpace};
use crate::sparse::CsrMatrix;
use crate::{math, Result, Vec3};

/// Gradients of the corner hat functions of a cell at reference point `x`.
fn corner_gradients(dim: usize, hs: &Vec3, x: &Vec3, out: &mut [Vec3; 8]) {
    for (j, g) in out.iter_mut().enumerate().take(1 << dim) {
        *g = [0.0; 3];
        for a in 0..dim {
            let mut d = 1.0;
            for b in 0..dim {
                let hi = (j >> b) & 1 == 1;
                d *= if a == b {
                    if hi { 1.0 / hs[b] } else { -1.0 / hs[b] }
                } else if hi {
                    x[b]
                } else {
                    1.0 - x[b]
                };
            }
            g[a] = d;
        }
    }
}

/// Hat functions of interior, non-hanging vertices ("free" vertices), with
/// hanging vertices expanded onto their masters and boundary vertices held
/// at zero.
#[derive(Debug, Clone)]
pub struct NodalGradients {
    free_index: Vec<Option<usize>>,
    /// Per cell, per free vertex touching it: its weight at each corner.
    groups: Vec<Vec<(usize, [f64; 8])>>,
    n_free: usize,
    laplace: Option<CholeskySolver>,
}

impl NodalGradients {
    pub fn new(mesh: &TreeMesh) -> Self {
        let nv = mesh.num_vertices();
        let mut direct: Vec<Option<&[(usize, f64)]>> = vec![None; nv];
        for hv in mesh.hanging_vertices() {
            direct[hv.vertex] = Some(&hv.masters);
        }
        let mut free_index = vec![None; nv];
        let mut n_free = 0;
        for v in 0..nv {
            if direct[v].is_none() && !mesh.is_vertex_on_boundary(v) {
                free_index[v] = Some(n_free);
                n_free += 1;
            }
        }
        fn close(v: usize, direct: &[Option<&[(usize, f64)]>], w: f64, out: &mut Vec<(usize, f64)>) {
            match direct[v] {
                None => out.push((v, w)),
                Some(ms) => ms.iter().for_each(|&(m, wm)| close(m, direct, w * wm, out)),
            }
        }
        let mut groups = Vec::with_capacity(mesh.num_cells());
        let mut closed = Vec::new();
        for cell in 0..mesh.num_cells() {
            let mut g: Vec<(usize, [f64; 8])> = Vec::new();
            for (j, &v) in mesh.cell_vertices(cell).iter().enumerate() {
                closed.clear();
                close(v, &direct, 1.0, &mut closed);
                for &(m, w) in &closed {
                    let Some(i) = free_index[m] else { continue };
                    match g.iter_mut().find(|e| e.0 == i) {
                        Some(e) => e.1[j] += w,
                        None => {
                            let mut c = [0.0; 8];
                            c[j] = w;
                            g.push((i, c));
                        }
                    }
                }
            }
            groups.push(g);
        }
        NodalGradients { free_index, groups, n_free, laplace: None }
    }

    pub fn num_free(&self) -> usize {
        self.n_free
    }

    pub fn free_index(&self, vertex: usize) -> Option<usize> {
        self.free_index[vertex]
    }

    /// `(h, ∇φ_v)` and `‖∇φ_v‖²` for every free vertex, plus `‖h‖²`.
    pub fn weak_divergence(&self, space: &EdgeSpace, h: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let mesh = space.mesh();
        let dim = space.dim();
        let tab = space.element().tabulate(&GaussRule::new(space.order() + 1));
        let mut dot = vec![0.0; self.n_free];
        let mut norm_g = vec![0.0; self.n_free];
        let mut norm_h = 0.0;
        let mut vals = vec![[0.0; 3]; tab.n];
        let mut curls = vec![[0.0; 3]; tab.n];
        let mut grads = [[0.0; 3]; 8];
        for cell in 0..mesh.num_cells() {
            let hs = mesh.cell_sizes(cell);
            let vol: f64 = (0..dim).map(|a| hs[a]).product();
            let scales = space.dof_scales(cell);
            let dofs = space.cell_dofs(cell);
            for q in 0..tab.len() {
                vals.copy_from_slice(tab.values(q));
                curls.copy_from_slice(tab.curls(q));
                scale_basis(dim, &hs, scales.iter().copied(), &mut vals, &mut curls);
                let mut hv = [0.0; 3];
                for (i, &d) in dofs.iter().enumerate() {
                    math::axpy(h[d], &vals[i], &mut hv);
                }
                let w = tab.weights[q] * vol;
                norm_h += w * math::dot(&hv, &hv);
                corner_gradients(dim, &hs, &tab.points[q], &mut grads);
                for (m, c) in &self.groups[cell] {
                    let mut g = [0.0; 3];
                    for j in 0..1 << dim {
                        math::axpy(c[j], &grads[j], &mut g);
                    }
                    dot[*m] += w * math::dot(&hv, &g);
                    norm_g[*m] += w * math::dot(&g, &g);
                }
            }
        }
        (dot, norm_g, norm_h)
    }

    fn laplacian(&self, mesh: &TreeMesh) -> CsrMatrix {
        let dim = mesh.dim();
        let mut rows = vec![BTreeSet::new(); self.n_free];
        for g in &self.groups {
            for (a, _) in g {
                rows[*a].extend(g.iter().map(|e| e.0));
            }
        }
        let mut l = CsrMatrix::from_rows(&rows);
        let rule = GaussRule::new(2);
        let mut grads = [[0.0; 3]; 8];
        for (cell, g) in self.groups.iter().enumerate() {
            let hs = mesh.cell_sizes(cell);
            let vol: f64 = (0..dim).map(|a| hs[a]).product();
            let nq = rule.len();
            for q in 0..nq.pow(dim as u32) {
                let mut x = [0.0; 3];
                let mut w = vol;
                let mut r = q;
                for xa in x.iter_mut().take(dim) {
                    *xa = rule.points[r % nq];
                    w *= rule.weights[r % nq];
                    r /= nq;
                }
                corner_gradients(dim, &hs, &x, &mut grads);
                let gv: Vec<Vec3> = g
                    .iter()
                    .map(|(_, c)| {
                        let mut v = [0.0; 3];
                        for j in 0..1 << dim {
                            math::axpy(c[j], &grads[j], &mut v);
                        }
                        v
                    })
                    .collect();
                for (a, (ia, _)) in g.iter().enumerate() {
                    for (b, (ib, _)) in g.iter().enumerate() {
                        l.add(*ia, *ib, w * math::dot(&gv[a], &gv[b]));
                    }
                }
            }
        }
        l
    }

    /// Edge-element coefficients (all DoFs) of `∇ψ`, `ψ` given at the free
    /// vertices.
    pub fn gradient_coefficients(&self, space: &EdgeSpace, psi: &[f64]) -> Vec<f64> {
        let mesh = space.mesh();
        let dim = space.dim();
        let grad_in = |cell: usize, x: &Vec3| {
            let b = mesh.cell_box(cell);
            let hs = mesh.cell_sizes(cell);
            let mut xi = [0.0; 3];
            for a in 0..dim {
                xi[a] = ((x[a] - b.lo[a]) / hs[a]).clamp(0.0, 1.0);
            }
            let mut grads = [[0.0; 3]; 8];
            corner_gradients(dim, &hs, &xi, &mut grads);
            let mut v = [0.0; 3];
            for (m, c) in &self.groups[cell] {
                for j in 0..1 << dim {
                    math::axpy(psi[*m] * c[j], &grads[j], &mut v);
                }
            }
            v
        };
        space.interpolate_by_owner(|cell, x| grad_in(cell, x))
    }

    /// Add `∇ψ` to `h` so that `(h − h_prev, ∇φ_v) = 0` for every free
    /// vertex. The curl of `h` is unchanged.
    pub fn correct(&mut self, space: &EdgeSpace, h: &mut [f64], h_prev: &[f64]) -> Result<()> {
        if self.n_free == 0 {
            return Ok(());
        }
        if self.laplace.is_none() {
            let mut s = CholeskySolver::new();
            s.factorize(&self.laplacian(space.mesh()))?;
            self.laplace = Some(s);
        }
        let delta: Vec<f64> = h.iter().zip(h_prev).map(|(a, b)| a - b).collect();
        let (mut rhs, _, _) = self.weak_divergence(space, &delta);
        rhs.iter_mut().for_each(|v| *v = -*v);
        self.laplace.as_ref().unwrap().solve_in_place(&mut rhs)?;
        let g = self.gradient_coefficients(space, &rhs);
        for (a, b) in h.iter_mut().zip(&g) {
            *a += b;
        }
        Ok(())
    }
}

impl EdgeSpace {
    /// Like [`EdgeSpace::interpolate`] for a field only known cell by cell,
    /// e.g. a piecewise polynomial with continuous tangential traces; each
    /// entity is evaluated in its owner cell.
    pub fn interpolate_by_owner(&self, g: impl Fn(usize, &Vec3) -> Vec3) -> Vec<f64> {
        let mesh = self.mesh();
        let mut out = vec![0.0; self.n_dofs()];
        let el = self.element();
        for e in 0..mesh.num_edges() {
            let (p, q) = mesh.edge_endpoints(e);
            let c = mesh.edge_owner_cell(e);
            let m = el.moments_on(&Span { lo: p, hi: q }, |x| g(c, x));
            out[self.edge_dof_range(e)].copy_from_slice(&m);
        }
        for f in 0..mesh.num_faces() {
            let b = mesh.face_box(f);
            let c = mesh.face_owner_cell(f);
            let m = el.moments_on(&Span { lo: b.lo, hi: b.hi }, |x| g(c, x));
            out[self.face_dof_range(f)].copy_from_slice(&m);
        }
        if !el.interior_dofs().is_empty() {
            for c in 0..mesh.num_cells() {
                let b = mesh.cell_box(c);
                let m = el.moments_on(&Span { lo: b.lo, hi: b.hi }, |x| g(c, x));
                out[self.interior_dof_range(c)].copy_from_slice(&m);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{Aabb, RefinementFlags};
    use crate::space::{build_space, FEFunction};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graded(dim: usize) -> TreeMesh {
        let hi = if dim == 2 { [1.0, 1.0, 0.0] } else { [1.0; 3] };
        let m = TreeMesh::new_uniform(&Aabb::new([0.0; 3], hi), dim, &vec![3; dim]).unwrap();
        let marks = (0..m.num_cells()).map(|c| m.cell_center(c)[0] < 0.5).collect();
        let m = m.refine_and_balance(&RefinementFlags::from_marks(marks)).unwrap();
        let marks = (0..m.num_cells()).map(|c| m.cell_center(c)[1] < 0.3).collect();
        m.refine_and_balance(&RefinementFlags::from_marks(marks)).unwrap()
    }

    #[test]
    fn gradient_coefficients_are_conforming_and_curl_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (dim, k) in [(2, 1), (2, 3), (3, 1), (3, 2)] {
            let space = build_space(graded(dim), k).unwrap();
            let ng = NodalGradients::new(space.mesh());
            assert!(ng.num_free() > 0);
            let psi: Vec<f64> = (0..ng.num_free()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = ng.gradient_coefficients(&space, &psi);
            let f = FEFunction::from_full(&space, g.clone());
            assert!(crate::space::max_tangential_jump(&f, 3) < 1e-10, "dim {dim} k {k}");
            // hanging and Dirichlet DoFs follow from the free ones
            let again = space.expand(&space.restrict(&g));
            let err = g.iter().zip(&again).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "dim {dim} k {k}: {err}");
            for c in 0..space.mesh().num_cells() {
                let (_, curl) = space.eval_in_cell(&g, c, &[0.3, 0.6, 0.2]);
                assert!(math::norm(&curl) < 1e-9, "dim {dim} k {k}");
            }
        }
    }

    #[test]
    fn correction_removes_divergence_and_keeps_curl() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (dim, k) in [(2, 1), (2, 2), (3, 1)] {
            let mut space = build_space(graded(dim), k).unwrap();
            space.clear_dirichlet();
            let free: Vec<f64> = (0..space.num_free()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h_prev = space.expand(&free);
            let free: Vec<f64> = (0..space.num_free()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut h = space.expand(&free);
            let before = h.clone();
            let mut ng = NodalGradients::new(space.mesh());
            ng.correct(&space, &mut h, &h_prev).unwrap();
            let delta: Vec<f64> = h.iter().zip(&h_prev).map(|(a, b)| a - b).collect();
            let (div, norm_g, norm_h) = ng.weak_divergence(&space, &delta);
            let worst = div.iter().zip(&norm_g).map(|(d, g)| d.abs() / math::sqrt(*g)).fold(0.0, f64::max);
            assert!(worst < 1e-12 * math::sqrt(norm_h), "dim {dim} k {k}: {worst}");
            for c in 0..space.mesh().num_cells() {
                let (_, c0) = space.eval_in_cell(&before, c, &[0.2, 0.7, 0.4]);
                let (_, c1) = space.eval_in_cell(&h, c, &[0.2, 0.7, 0.4]);
                let d: Vec3 = [c0[0] - c1[0], c0[1] - c1[1], c0[2] - c1[2]];
                assert!(math::norm(&d) < 1e-9 * (1.0 + math::norm(&c0)));
            }
        }
    }
}
