//! Dense row-major matrices, a one-sided Jacobi thin SVD and an LU solver
//! with partial pivoting.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err("Matrix::from_vec", &[rows, cols], &[data.len()]);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if let Some(bad) = columns.iter().find(|c| c.len() != rows) {
            return shape_err("Matrix::from_columns", &[rows], &[bad.len()]);
        }
        Ok(Matrix::from_fn(rows, columns.len(), |i, j| columns[j][i]))
    }

    pub fn column_vector(v: &[f64]) -> Self {
        Matrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows, "column length");
        for (i, &x) in v.iter().enumerate() {
            self[(i, j)] = x;
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Copies the first `k` columns.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        let k = k.min(self.cols);
        Matrix::from_fn(self.rows, k, |i, j| self[(i, j)])
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        Matrix::from_fn(rows.len(), self.cols, |i, j| self[(rows[i], j)])
    }

    pub fn select_columns(&self, cols: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, cols.len(), |i, j| self[(i, cols[j])])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return shape_err("matmul", &self.shape(), &other.shape());
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm_acc(
            &self.data,
            &other.data,
            &mut out.data,
            self.rows,
            self.cols,
            other.cols,
        );
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return shape_err("matvec", &self.shape(), &[v.len()]);
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// Computes `selfᵀ v` without forming the transpose.
    pub fn tr_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rows != v.len() {
            return shape_err("tr_matvec", &self.shape(), &[v.len()]);
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                for (o, &a) in out.iter_mut().zip(self.row(i)) {
                    *o += a * vi;
                }
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return shape_err("sub", &self.shape(), &other.shape());
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `c += a · b` for row-major `a` (m×k), `b` (k×n), `c` (m×n).
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Thin singular value decomposition `A = U diag(σ) Vᵀ` with `r = min(n, N)`
/// columns in `U`, singular values sorted in descending order.
///
/// Each column of `U` is signed so that its entry of largest magnitude is
/// positive (lowest row index on ties); the matching row of `Vᵀ` flips with it.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

const JACOBI_MAX_SWEEPS: usize = 80;

pub fn thin_svd(a: &Matrix) -> Result<Svd> {
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::Input("thin_svd of an empty matrix".into()));
    }
    if !a.all_finite() {
        return Err(Error::Input("thin_svd input contains non-finite entries".into()));
    }
    let mut svd = if a.rows >= a.cols {
        let (u, sigma, v) = jacobi_tall(a)?;
        Svd {
            u,
            sigma,
            vt: v.transpose(),
        }
    } else {
        // Aᵀ = U' Σ V'ᵀ, so A = V' Σ U'ᵀ.
        let (u2, sigma, v2) = jacobi_tall(&a.transpose())?;
        Svd {
            u: v2,
            sigma,
            vt: u2.transpose(),
        }
    };
    fix_signs(&mut svd);
    Ok(svd)
}

/// One-sided Jacobi on a matrix with at least as many rows as columns.
/// Returns `(U, σ, V)` with `U` n×N and `V` N×N.
fn jacobi_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let n = a.rows;
    let k = a.cols;
    // Column-major working copies make the rotations contiguous.
    let mut g: Vec<Vec<f64>> = (0..k).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            e
        })
        .collect();
    let eps = f64::EPSILON;
    // Rounding in the dot products grows with the column length, so both the
    // orthogonality test and the zero-column cutoff scale with it. Columns
    // below the cutoff are numerical zeros of A; rotating them against
    // others only chases rounding noise.
    let tol = eps * n as f64;
    let negligible = (tol * a.frobenius_norm()).powi(2);
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = dot(&g[p], &g[p]);
                let beta = dot(&g[q], &g[q]);
                let gamma = dot(&g[p], &g[q]);
                if gamma == 0.0
                    || alpha.min(beta) <= negligible
                    || gamma.abs() <= tol * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (gp, gq) = pair_mut(&mut g, p, q);
                rotate(gp, gq, c, s);
                let (vp, vq) = pair_mut(&mut v, p, q);
                rotate(vp, vq, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Instability {
            step: JACOBI_MAX_SWEEPS,
            detail: "Jacobi SVD did not converge".into(),
        });
    }

    let norms: Vec<f64> = g.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    // Stable sort keeps the original column order among equal values.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let sigma_max = norms[order[0]];

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut sigma = Vec::with_capacity(k);
    let mut v_cols = Vec::with_capacity(k);
    for &j in &order {
        let s = norms[j];
        let col = if s > 0.0 && s > sigma_max * eps * (n as f64) {
            g[j].iter().map(|x| x / s).collect()
        } else {
            // Directions for (numerically) zero singular values are not
            // determined by the data; pick a completion that keeps U orthonormal.
            complete_orthonormal(&u_cols, n)
        };
        u_cols.push(col);
        sigma.push(s);
        v_cols.push(v[j].clone());
    }
    Ok((
        Matrix::from_columns(&u_cols)?,
        sigma,
        Matrix::from_columns(&v_cols)?,
    ))
}

fn pair_mut(cols: &mut [Vec<f64>], p: usize, q: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
    debug_assert!(p < q);
    let (lo, hi) = cols.split_at_mut(q);
    (&mut lo[p], &mut hi[0])
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let xa = *a;
        let yb = *b;
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// First canonical basis vector that survives Gram-Schmidt against `basis`.
fn complete_orthonormal(basis: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    for e in 0..n {
        let mut w = vec![0.0; n];
        w[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&w, b);
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi -= proj * bi;
                }
            }
        }
        let norm = dot(&w, &w).sqrt();
        if norm > 0.5 {
            return w.iter().map(|x| x / norm).collect();
        }
        if best.as_ref().map_or(true, |b| dot(b, b) < norm * norm) {
            best = Some(w);
        }
    }
    let w = best.unwrap_or_else(|| vec![0.0; n]);
    let norm = dot(&w, &w).sqrt().max(f64::MIN_POSITIVE);
    w.iter().map(|x| x / norm).collect()
}

fn fix_signs(svd: &mut Svd) {
    for j in 0..svd.u.cols {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..svd.u.rows {
            let a = svd.u[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if svd.u[(best, j)] < 0.0 {
            for i in 0..svd.u.rows {
                svd.u[(i, j)] = -svd.u[(i, j)];
            }
            for c in 0..svd.vt.cols {
                svd.vt[(j, c)] = -svd.vt[(j, c)];
            }
        }
    }
}

/// LU factorisation with partial pivoting, `P A = L U`.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Matrix,
    perm: Vec<usize>,
}

/// Relative pivot size below which a system is reported as singular.
pub const SINGULAR_PIVOT_RTOL: f64 = 1e-12;

impl Lu {
    pub fn factor(a: &Matrix) -> Result<Lu> {
        Lu::factor_with_tol(a, SINGULAR_PIVOT_RTOL)
    }

    /// Factors `a`, failing when a pivot falls below `rtol · max|a|`.
    pub fn factor_with_tol(a: &Matrix, rtol: f64) -> Result<Lu> {
        if a.rows != a.cols {
            return shape_err("Lu::factor", &a.shape(), &[a.cols, a.cols]);
        }
        let n = a.rows;
        let scale = a.max_abs();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut pmax = lu[(k, k)].abs();
            for i in k + 1..n {
                let v = lu[(i, k)].abs();
                if v > pmax {
                    pmax = v;
                    p = i;
                }
            }
            if !(pmax > rtol * scale) || scale == 0.0 {
                return Err(Error::Singular {
                    index: k,
                    magnitude: pmax,
                });
            }
            if p != k {
                for j in 0..n {
                    lu.data.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let f = lu[(i, k)] / pivot;
                lu[(i, k)] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[(i, j)] -= f * lu[(k, j)];
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Smallest absolute pivot of the factorisation.
    pub fn min_pivot(&self) -> f64 {
        (0..self.n)
            .map(|k| self.lu[(k, k)].abs())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return shape_err("Lu::solve", &[self.n], &[b.len()]);
        }
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s / self.lu[(i, i)];
        }
        Ok(x)
    }

    /// Solves `Aᵀ x = b`.
    pub fn solve_transpose_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return shape_err("Lu::solve_transpose", &[self.n], &[b.len()]);
        }
        let n = self.n;
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ y = b, Lᵀ z = y, x = Pᵀ z.
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s -= self.lu[(j, i)] * y[j];
            }
            y[i] = s / self.lu[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= self.lu[(j, i)] * y[j];
            }
            y[i] = s;
        }
        let mut x = vec![0.0; n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = y[k];
        }
        Ok(x)
    }

    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        if b.rows != self.n {
            return shape_err("Lu::solve", &[self.n, self.n], &b.shape());
        }
        let mut out = Matrix::zeros(b.rows, b.cols);
        for j in 0..b.cols {
            out.set_column(j, &self.solve_vec(&b.column(j))?);
        }
        Ok(out)
    }

    pub fn inverse(&self) -> Result<Matrix> {
        self.solve(&Matrix::identity(self.n))
    }
}

/// Solution of a small dense system together with its residual `‖Mx − b‖_max`.
#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Matrix,
    pub residual: f64,
}

pub fn solve_small(m: &Matrix, b: &Matrix) -> Result<Solution> {
    let lu = Lu::factor(m)?;
    let x = lu.solve(b)?;
    let residual = m.matmul(&x)?.sub(b)?.max_abs();
    Ok(Solution { x, residual })
}
