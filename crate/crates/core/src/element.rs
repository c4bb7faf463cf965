//! Reference first-kind Nédélec element of order `k` on `[0,1]^dim`.
//!
//! The local space is spanned by Legendre products (component `c` has degree
//! `k-1` in `x_c` and `k` in the other variables). Degrees of freedom are
//! normalized tangential moments against shifted Legendre polynomials on
//! edges, faces and the cell interior. The nodal basis is the dual of those
//! moments, obtained by inverting the moment matrix once per `(dim, k)`.
//!
//! Local DoF order: edges in mesh order (`k` each), then faces in mesh order
//! (3D only), then the interior.

use alloc::vec;
use alloc::vec::Vec;

use faer::linalg::solvers::DenseSolveCore;
use faer::Mat;

use crate::quadrature::{shifted_legendre, GaussRule};
use crate::{Error, Result, Vec3};

/// Geometric support of a local DoF.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    Edge(usize),
    Face(usize),
    Interior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalDof {
    pub support: Support,
    /// Field component the moment acts on. Physical DoFs scale with the
    /// inverse cell size along this axis.
    pub axis: usize,
}

/// An axis-aligned entity given as a sub-box of some coordinate frame.
/// Axes with `hi > lo` span the entity; the rest are fixed at `lo`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Span {
    fn axes(&self, dim: usize) -> Vec<usize> {
        (0..dim).filter(|&a| self.hi[a] > self.lo[a]).collect()
    }

    fn point(&self, t: &Vec3) -> Vec3 {
        let mut p = self.lo;
        for a in 0..3 {
            p[a] += t[a] * (self.hi[a] - self.lo[a]);
        }
        p
    }
}

/// One moment functional: field component `axis` against `Π_a L_{deg[a]}(t_a)`
/// over the spanning axes of an entity.
#[derive(Debug, Clone, Copy)]
struct Moment {
    axis: usize,
    deg: [usize; 3],
}

#[derive(Debug, Clone, Copy)]
struct RawTerm {
    comp: usize,
    deg: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct ReferenceElement {
    dim: usize,
    k: usize,
    raw: Vec<RawTerm>,
    /// Column `j` holds the raw-basis coefficients of basis function `j`.
    coeffs: Vec<f64>,
    dofs: Vec<LocalDof>,
    edge_dofs: Vec<Vec<usize>>,
    face_dofs: Vec<Vec<usize>>,
    interior_dofs: Vec<usize>,
    moment_rule: GaussRule,
}

/// Dimension of the local space.
pub fn local_dim(dim: usize, k: usize) -> usize {
    if dim == 2 {
        2 * k * (k + 1)
    } else {
        3 * k * (k + 1) * (k + 1)
    }
}

/// The moments attached to an entity spanning `axes` (ascending).
fn entity_moments(axes: &[usize], k: usize) -> Vec<Moment> {
    let mut out = Vec::new();
    match axes.len() {
        1 => {
            for m in 0..k {
                let mut deg = [0; 3];
                deg[axes[0]] = m;
                out.push(Moment { axis: axes[0], deg });
            }
        }
        _ => {
            if k < 2 {
                return out;
            }
            for &c in axes {
                // degree k-1 along the component, k-2 along the other spanning axes
                let lim: Vec<usize> = axes.iter().map(|&a| if a == c { k } else { k - 1 }).collect();
                let total: usize = lim.iter().product();
                for mut r in 0..total {
                    let mut deg = [0; 3];
                    for (s, &a) in axes.iter().enumerate() {
                        deg[a] = r % lim[s];
                        r /= lim[s];
                    }
                    out.push(Moment { axis: c, deg });
                }
            }
        }
    }
    out
}

/// Reference spans of the local edges, in mesh order.
pub fn reference_edges(dim: usize) -> Vec<Span> {
    let mut out = Vec::new();
    for a in 0..dim {
        let others: Vec<usize> = (0..dim).filter(|&o| o != a).collect();
        for j in 0..(1usize << others.len()) {
            let mut lo = [0.0; 3];
            for (bit, &o) in others.iter().enumerate() {
                if j >> bit & 1 == 1 {
                    lo[o] = 1.0;
                }
            }
            let mut hi = lo;
            hi[a] = 1.0;
            out.push(Span { lo, hi });
        }
    }
    out
}

/// Reference spans of the local faces of the unit cube, x-, x+, y-, y+, z-, z+.
pub fn reference_faces() -> Vec<Span> {
    let mut out = Vec::new();
    for a in 0..3 {
        for side in 0..2 {
            let mut lo = [0.0; 3];
            let mut hi = [1.0; 3];
            lo[a] = side as f64;
            hi[a] = side as f64;
            out.push(Span { lo, hi });
        }
    }
    out
}

fn interior_span(dim: usize) -> Span {
    let mut hi = [0.0; 3];
    for h in hi.iter_mut().take(dim) {
        *h = 1.0;
    }
    Span { lo: [0.0; 3], hi }
}

impl ReferenceElement {
    pub fn new(dim: usize, k: usize) -> Result<Self> {
        if !(dim == 2 || dim == 3) || !(1..=3).contains(&k) {
            return Err(Error::OutOfRange(alloc::format!("no element for dim {dim}, order {k}")));
        }
        let mut raw = Vec::new();
        let hi = |a: usize| if a < dim { k + 1 } else { 1 };
        for comp in 0..dim {
            for d2 in 0..hi(2) {
                for d1 in 0..hi(1) {
                    for d0 in 0..hi(0) {
                        let deg = [d0, d1, d2];
                        if deg[comp] < k {
                            raw.push(RawTerm { comp, deg });
                        }
                    }
                }
            }
        }
        let n = local_dim(dim, k);
        debug_assert_eq!(raw.len(), n);

        let mut dofs = Vec::with_capacity(n);
        let mut edge_dofs = Vec::new();
        let mut face_dofs = Vec::new();
        for (e, span) in reference_edges(dim).iter().enumerate() {
            let mut ids = Vec::new();
            for m in entity_moments(&span.axes(dim), k) {
                ids.push(dofs.len());
                dofs.push(LocalDof { support: Support::Edge(e), axis: m.axis });
            }
            edge_dofs.push(ids);
        }
        if dim == 3 {
            for (f, span) in reference_faces().iter().enumerate() {
                let mut ids = Vec::new();
                for m in entity_moments(&span.axes(3), k) {
                    ids.push(dofs.len());
                    dofs.push(LocalDof { support: Support::Face(f), axis: m.axis });
                }
                face_dofs.push(ids);
            }
        }
        let mut interior_dofs = Vec::new();
        for m in entity_moments(&interior_span(dim).axes(dim), k) {
            interior_dofs.push(dofs.len());
            dofs.push(LocalDof { support: Support::Interior, axis: m.axis });
        }
        debug_assert_eq!(dofs.len(), n);

        let mut el = ReferenceElement {
            dim,
            k,
            raw,
            coeffs: vec![0.0; n * n],
            dofs,
            edge_dofs,
            face_dofs,
            interior_dofs,
            moment_rule: GaussRule::new(k + 2),
        };
        // moment matrix D[i][m] = sigma_i(raw_m)
        let mut d = Mat::<f64>::zeros(n, n);
        for m in 0..n {
            let term = el.raw[m];
            let sig = el.all_moments(|x| {
                let mut v = [0.0; 3];
                v[term.comp] = el.raw_value(&term, x);
                v
            });
            for i in 0..n {
                d[(i, m)] = sig[i];
            }
        }
        let inv = d.as_ref().full_piv_lu().inverse();
        for i in 0..n {
            for j in 0..n {
                let v = inv[(i, j)];
                if !v.is_finite() {
                    return Err(Error::Singular("moment matrix".into()));
                }
                el.coeffs[i * n + j] = v;
            }
        }
        Ok(el)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.k
    }

    pub fn n_dofs(&self) -> usize {
        self.dofs.len()
    }

    pub fn dofs(&self) -> &[LocalDof] {
        &self.dofs
    }

    pub fn edge_dofs(&self, edge: usize) -> &[usize] {
        &self.edge_dofs[edge]
    }

    pub fn face_dofs(&self, face: usize) -> &[usize] {
        &self.face_dofs[face]
    }

    pub fn interior_dofs(&self) -> &[usize] {
        &self.interior_dofs
    }

    fn raw_value(&self, t: &RawTerm, x: &Vec3) -> f64 {
        let mut v = [0.0; 4];
        let mut d = [0.0; 4];
        let mut out = 1.0;
        for a in 0..self.dim {
            shifted_legendre(self.k, x[a], &mut v, &mut d);
            out *= v[t.deg[a]];
        }
        out
    }

    /// Reference values `φ̂_j(x̂)` and curls (scalar curl in slot 2 for 2D).
    pub fn eval(&self, x: &Vec3, values: &mut [Vec3], curls: &mut [Vec3]) {
        let n = self.n_dofs();
        let mut lv = [[0.0; 4]; 3];
        let mut ld = [[0.0; 4]; 3];
        for a in 0..self.dim {
            shifted_legendre(self.k, x[a], &mut lv[a], &mut ld[a]);
        }
        let mut rv = [[0.0; 3]; 144];
        let mut rc = [[0.0; 3]; 144];
        for (m, t) in self.raw.iter().enumerate() {
            let mut val = 1.0;
            let mut grad = [1.0; 3];
            for a in 0..self.dim {
                val *= lv[a][t.deg[a]];
                for (g, gr) in grad.iter_mut().enumerate().take(self.dim) {
                    *gr *= if g == a { ld[a][t.deg[a]] } else { lv[a][t.deg[a]] };
                }
            }
            let mut v = [0.0; 3];
            v[t.comp] = val;
            rv[m] = v;
            rc[m] = raw_curl(self.dim, t.comp, &grad);
        }
        for j in 0..n {
            let mut v = [0.0; 3];
            let mut c = [0.0; 3];
            for m in 0..n {
                let w = self.coeffs[m * n + j];
                if w != 0.0 {
                    crate::math::axpy(w, &rv[m], &mut v);
                    crate::math::axpy(w, &rc[m], &mut c);
                }
            }
            values[j] = v;
            curls[j] = c;
        }
    }

    /// Moments of `f` on an entity described by `span` in the frame that `f`
    /// consumes. The result follows the local DoF order of one entity of
    /// that shape, each moment normalized by the entity measure.
    pub fn moments_on(&self, span: &Span, f: impl Fn(&Vec3) -> Vec3) -> Vec<f64> {
        let axes = span.axes(self.dim);
        let moms = entity_moments(&axes, self.k);
        let mut out = vec![0.0; moms.len()];
        let rule = &self.moment_rule;
        let nq = rule.len();
        let total = (0..axes.len()).fold(1, |acc, _| acc * nq);
        let mut lv = [[0.0; 4]; 3];
        let mut ld = [0.0; 4];
        for q in 0..total {
            let mut t = [0.0; 3];
            let mut w = 1.0;
            let mut r = q;
            for &a in &axes {
                let i = r % nq;
                r /= nq;
                t[a] = rule.points[i];
                w *= rule.weights[i];
                shifted_legendre(self.k, t[a], &mut lv[a], &mut ld);
            }
            let fx = f(&span.point(&t));
            for (o, m) in out.iter_mut().zip(&moms) {
                let mut qv = 1.0;
                for &a in &axes {
                    qv *= lv[a][m.deg[a]];
                }
                *o += w * fx[m.axis] * qv;
            }
        }
        out
    }

    /// Moments of every reference basis function on an entity given in
    /// reference coordinates. Returns the field axis of each moment and the
    /// row-major `moments × n_dofs` matrix.
    pub fn basis_moments_on(&self, span: &Span) -> (Vec<usize>, Vec<f64>) {
        let axes = span.axes(self.dim);
        let moms = entity_moments(&axes, self.k);
        let n = self.n_dofs();
        let mut out = vec![0.0; moms.len() * n];
        let rule = &self.moment_rule;
        let nq = rule.len();
        let total = (0..axes.len()).fold(1, |acc, _| acc * nq);
        let mut lv = [[0.0; 4]; 3];
        let mut ld = [0.0; 4];
        let mut vals = vec![[0.0; 3]; n];
        let mut curls = vec![[0.0; 3]; n];
        for q in 0..total {
            let mut t = [0.0; 3];
            let mut w = 1.0;
            let mut r = q;
            for &a in &axes {
                let i = r % nq;
                r /= nq;
                t[a] = rule.points[i];
                w *= rule.weights[i];
                shifted_legendre(self.k, t[a], &mut lv[a], &mut ld);
            }
            self.eval(&span.point(&t), &mut vals, &mut curls);
            for (i, m) in moms.iter().enumerate() {
                let mut qv = w;
                for &a in &axes {
                    qv *= lv[a][m.deg[a]];
                }
                let row = &mut out[i * n..(i + 1) * n];
                for (o, v) in row.iter_mut().zip(&vals) {
                    *o += qv * v[m.axis];
                }
            }
        }
        (moms.iter().map(|m| m.axis).collect(), out)
    }

    /// All local moments of `f` given in reference coordinates, in local DoF order.
    pub fn all_moments(&self, f: impl Fn(&Vec3) -> Vec3) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_dofs());
        for span in reference_edges(self.dim) {
            out.extend(self.moments_on(&span, &f));
        }
        if self.dim == 3 {
            for span in reference_faces() {
                out.extend(self.moments_on(&span, &f));
            }
        }
        out.extend(self.moments_on(&interior_span(self.dim), &f));
        out
    }

    /// Values and curls at each point of a tensor rule on the reference cell.
    pub fn tabulate(&self, rule: &GaussRule) -> Tabulation {
        let n = self.n_dofs();
        let nq1 = rule.len();
        let nq = (0..self.dim).fold(1, |acc, _| acc * nq1);
        let mut points = Vec::with_capacity(nq);
        let mut weights = Vec::with_capacity(nq);
        let mut values = vec![[0.0; 3]; nq * n];
        let mut curls = vec![[0.0; 3]; nq * n];
        for q in 0..nq {
            let mut x = [0.0; 3];
            let mut w = 1.0;
            let mut r = q;
            for xa in x.iter_mut().take(self.dim) {
                let i = r % nq1;
                r /= nq1;
                *xa = rule.points[i];
                w *= rule.weights[i];
            }
            self.eval(&x, &mut values[q * n..(q + 1) * n], &mut curls[q * n..(q + 1) * n]);
            points.push(x);
            weights.push(w);
        }
        Tabulation { n, points, weights, values, curls }
    }
}

fn raw_curl(dim: usize, comp: usize, grad: &Vec3) -> Vec3 {
    if dim == 2 {
        // curl (u_x, u_y) = d_x u_y - d_y u_x
        return if comp == 0 { [0.0, 0.0, -grad[1]] } else { [0.0, 0.0, grad[0]] };
    }
    let mut c = [0.0; 3];
    match comp {
        0 => {
            c[1] = grad[2];
            c[2] = -grad[1];
        }
        1 => {
            c[0] = -grad[2];
            c[2] = grad[0];
        }
        _ => {
            c[0] = grad[1];
            c[1] = -grad[0];
        }
    }
    c
}

/// Reference basis values and curls at the points of a tensor rule.
#[derive(Debug, Clone)]
pub struct Tabulation {
    pub n: usize,
    pub points: Vec<Vec3>,
    pub weights: Vec<f64>,
    values: Vec<Vec3>,
    curls: Vec<Vec3>,
}

impl Tabulation {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn values(&self, q: usize) -> &[Vec3] {
        &self.values[q * self.n..(q + 1) * self.n]
    }

    pub fn curls(&self, q: usize) -> &[Vec3] {
        &self.curls[q * self.n..(q + 1) * self.n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimensions() {
        for k in 1..=3 {
            assert_eq!(ReferenceElement::new(2, k).unwrap().n_dofs(), 2 * k * (k + 1));
            assert_eq!(ReferenceElement::new(3, k).unwrap().n_dofs(), 3 * k * (k + 1) * (k + 1));
        }
        assert_eq!(ReferenceElement::new(3, 2).unwrap().n_dofs(), 54);
        assert!(ReferenceElement::new(2, 4).is_err());
    }

    #[test]
    fn moment_matrix_of_basis_is_identity() {
        for dim in 2..=3 {
            for k in 1..=3 {
                let el = ReferenceElement::new(dim, k).unwrap();
                let n = el.n_dofs();
                for j in 0..n {
                    let sig = el.all_moments(|x| {
                        let mut v = vec![[0.0; 3]; n];
                        let mut c = vec![[0.0; 3]; n];
                        el.eval(x, &mut v, &mut c);
                        v[j]
                    });
                    for (i, s) in sig.iter().enumerate() {
                        let e = if i == j { 1.0 } else { 0.0 };
                        assert!((s - e).abs() < 1e-10, "dim {dim} k {k} ({i},{j}) = {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn lowest_order_2d_basis_is_classical() {
        // bottom x-edge: (1-y, 0); top x-edge: (y, 0); left y-edge: (0, 1-x); right: (0, x)
        let el = ReferenceElement::new(2, 1).unwrap();
        let mut v = [[0.0; 3]; 4];
        let mut c = [[0.0; 3]; 4];
        let x = [0.3, 0.8, 0.0];
        el.eval(&x, &mut v, &mut c);
        let expect = [[0.2, 0.0], [0.8, 0.0], [0.0, 0.7], [0.0, 0.3]];
        let curl = [1.0, -1.0, -1.0, 1.0];
        for j in 0..4 {
            assert!((v[j][0] - expect[j][0]).abs() < 1e-13);
            assert!((v[j][1] - expect[j][1]).abs() < 1e-13);
            assert!((c[j][2] - curl[j]).abs() < 1e-13);
        }
    }

    #[test]
    fn curl_matches_finite_differences() {
        let el = ReferenceElement::new(3, 2).unwrap();
        let n = el.n_dofs();
        let x = [0.31, 0.62, 0.17];
        let h = 1e-6;
        let mut v0 = vec![[0.0; 3]; n];
        let mut c0 = vec![[0.0; 3]; n];
        el.eval(&x, &mut v0, &mut c0);
        let ev = |p: Vec3| {
            let mut v = vec![[0.0; 3]; n];
            let mut c = vec![[0.0; 3]; n];
            el.eval(&p, &mut v, &mut c);
            v
        };
        let mut grads = vec![[[0.0; 3]; 3]; n];
        for a in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[a] += h;
            xm[a] -= h;
            let (vp, vm) = (ev(xp), ev(xm));
            for j in 0..n {
                for c in 0..3 {
                    grads[j][c][a] = (vp[j][c] - vm[j][c]) / (2.0 * h);
                }
            }
        }
        for j in 0..n {
            let g = &grads[j];
            let fd = [g[2][1] - g[1][2], g[0][2] - g[2][0], g[1][0] - g[0][1]];
            for c in 0..3 {
                assert!((fd[c] - c0[j][c]).abs() < 1e-6 * (1.0 + c0[j][c].abs()));
            }
        }
    }

    #[test]
    fn tabulation_integrates_partition() {
        let el = ReferenceElement::new(2, 2).unwrap();
        let tab = el.tabulate(&GaussRule::new(4));
        assert_eq!(tab.len(), 16);
        let w: f64 = tab.weights.iter().sum();
        assert!((w - 1.0).abs() < 1e-14);
    }
}
