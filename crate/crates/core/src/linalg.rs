//! Linear solvers: sparse Cholesky with symbolic reuse, an exact Schur
//! complement for one bordering constraint, and Jacobi-preconditioned CG.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use faer::linalg::solvers::SolveCore;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Side};

use crate::math::{dot_slice, norm2};
use crate::sparse::CsrMatrix;
use crate::{Error, Result};

/// Thread count used by the sparse factorization; `0` picks all cores.
#[cfg(feature = "std")]
pub fn set_threads(threads: usize) {
    let par = if threads == 1 { faer::Par::Seq } else { faer::Par::rayon(threads) };
    faer::set_global_parallelism(par);
}

/// Cholesky solver for symmetric positive definite CSR matrices. The
/// symbolic analysis is computed on first use and reused while the pattern
/// stays the same.
#[derive(Debug, Default, Clone)]
pub struct CholeskySolver {
    symbolic: Option<(Vec<usize>, Vec<usize>, SymbolicLlt<usize>)>,
    factor: Option<Llt<usize, f64>>,
}

impl CholeskySolver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn factorize(&mut self, a: &CsrMatrix) -> Result<()> {
        let n = a.n();
        // a symmetric CSR matrix is its own CSC transpose
        let reuse = matches!(&self.symbolic, Some((p, c, _)) if p == a.row_ptr() && c == a.col_idx());
        if !reuse {
            let sym = SymbolicSparseColMatRef::new_checked(n, n, a.row_ptr(), None, a.col_idx());
            let s = SymbolicLlt::try_new(sym, Side::Lower)
                .map_err(|e| Error::Singular(format!("symbolic factorization failed: {e:?}")))?;
            self.symbolic = Some((a.row_ptr().to_vec(), a.col_idx().to_vec(), s));
        }
        let (ptr, idx, sym_llt) = self.symbolic.as_ref().unwrap();
        let sym = SymbolicSparseColMatRef::new_checked(n, n, ptr, None, idx);
        let mat = SparseColMatRef::new(sym, a.values());
        let llt = Llt::try_new_with_symbolic(sym_llt.clone(), mat, Side::Lower)
            .map_err(|e| Error::Singular(format!("matrix is not positive definite: {e:?}")))?;
        self.factor = Some(llt);
        Ok(())
    }

    pub fn solve_in_place(&self, b: &mut [f64]) -> Result<()> {
        let f = self.factor.as_ref().ok_or_else(|| Error::Precondition("solve before factorization".into()))?;
        let n = b.len();
        f.solve_in_place_with_conj(Conj::No, MatMut::from_column_major_slice_mut(b, n, 1));
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("non-finite solution".into()));
        }
        Ok(())
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x)?;
        Ok(x)
    }
}

/// Solver for `[[A, c], [cᵀ, 0]] [x; l] = [r; s]` with `A` SPD.
#[derive(Debug, Default, Clone)]
pub struct SaddleSolver {
    chol: CholeskySolver,
    c: Option<(Vec<f64>, Vec<f64>, f64)>,
}

impl SaddleSolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Factorize `A` and, if a border `c` is given, its Schur complement.
    pub fn factorize(&mut self, a: &CsrMatrix, c: Option<&[f64]>) -> Result<()> {
        self.chol.factorize(a)?;
        self.c = match c {
            None => None,
            Some(c) => {
                let y = self.chol.solve(c)?;
                let s = dot_slice(c, &y);
                if !(s.abs() > 0.0) || !s.is_finite() {
                    return Err(Error::Singular("constraint row has a zero Schur complement".into()));
                }
                Some((c.to_vec(), y, s))
            }
        };
        Ok(())
    }

    /// Returns `x` and, with a border, the multiplier `l`.
    pub fn solve(&self, r: &[f64], s: f64) -> Result<(Vec<f64>, f64)> {
        let mut x = self.chol.solve(r)?;
        match &self.c {
            None => Ok((x, 0.0)),
            Some((c, y, schur)) => {
                let l = (dot_slice(c, &x) - s) / schur;
                for (xi, yi) in x.iter_mut().zip(y) {
                    *xi -= l * yi;
                }
                Ok((x, l))
            }
        }
    }
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterativeStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Jacobi-preconditioned conjugate gradients for SPD `a`.
pub fn conjugate_gradient(a: &CsrMatrix, b: &[f64], rtol: f64, max_iter: usize) -> Result<(Vec<f64>, IterativeStats)> {
    let n = a.n();
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((x, IterativeStats { iterations: 0, relative_residual: 0.0 }));
    }
    let dinv: Vec<f64> = a.diagonal().iter().map(|d| if *d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot_slice(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=max_iter {
        a.matvec(&p, &mut ap);
        let pap = dot_slice(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Singular("matrix is not positive definite".into()));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rel = norm2(&r) / bnorm;
        if rel <= rtol {
            return Ok((x, IterativeStats { iterations: it, relative_residual: rel }));
        }
        for i in 0..n {
            z[i] = r[i] * dinv[i];
        }
        let rz_new = dot_slice(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NonConvergence { iterations: max_iter, residual: norm2(&r) / bnorm })
}
