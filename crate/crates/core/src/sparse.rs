//! Compressed sparse row matrices with a fixed, sorted pattern.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Square pattern from per-row column sets.
    pub fn from_rows(rows: &[BTreeSet<usize>]) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        for r in rows {
            col_idx.extend(r.iter().copied());
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        CsrMatrix { n, row_ptr, col_idx, values: vec![0.0; nnz] }
    }

    /// Pattern coupling every pair of indices within each group.
    pub fn from_groups<'a>(n: usize, groups: impl Iterator<Item = &'a [usize]>) -> Self {
        let mut rows = vec![BTreeSet::new(); n];
        for g in groups {
            for &i in g {
                rows[i].extend(g.iter().copied());
            }
        }
        Self::from_rows(&rows)
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix { n, row_ptr: (0..=n).collect(), col_idx: (0..n).collect(), values: vec![1.0; n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Position of `(i, j)` in the value array, if in the pattern.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].binary_search(&j).ok().map(|p| r.start + p)
    }

    /// Accumulate into an entry; panics if `(i, j)` is outside the pattern.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let p = self.position(i, j).expect("entry outside the sparsity pattern");
        self.values[p] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map(|p| self.values[p]).unwrap_or(0.0)
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let (c, v) = self.row(i);
            *yi = c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum();
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        y
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                worst = worst.max((a - self.get(j, i)).abs());
            }
        }
        worst / scale
    }

    /// Row-major dense copy, for small problems and tests.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                d[i * self.n + j] = a;
            }
        }
        d
    }

    /// Matrix Market coordinate text (general real, 1-based indices).
    pub fn to_matrix_market(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "%%MatrixMarket matrix coordinate real general");
        let _ = writeln!(s, "{} {} {}", self.n, self.n, self.nnz());
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                let _ = writeln!(s, "{} {} {:.17e}", i + 1, j + 1, a);
            }
        }
        s
    }
}
