//! Small dense matrices and the slow-diffusion coefficient.
//!
//! State dimensions here are tiny (`d` is 1-3 in every benchmark), so plain
//! row-major storage with LU-based solves is all that is needed.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = F::one();
        }
        m
    }

    pub fn from_rows(rows: &[&[F]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.cols + j] = v;
    }

    /// `out = self * v`.
    pub fn mul_vec(&self, v: &[F], out: &mut [F]) {
        assert_eq!(v.len(), self.cols);
        assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = F::zero();
            for (a, b) in row.iter().zip(v) {
                acc += *a * *b;
            }
            *o = acc;
        }
    }

    /// `self * selfᵀ`.
    pub fn aat(&self) -> Matrix<F> {
        let n = self.rows;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = F::zero();
                for k in 0..self.cols {
                    acc += self.get(i, k) * self.get(j, k);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// LU decomposition with partial pivoting; returns `(lu, perm, det)`.
    fn lu(&self) -> Option<(Matrix<F>, Vec<usize>, F)> {
        assert_eq!(self.rows, self.cols, "lu requires a square matrix");
        let n = self.rows;
        let mut lu = self.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut det = F::one();
        for k in 0..n {
            let mut p = k;
            let mut max = lu.get(k, k).abs();
            for i in (k + 1)..n {
                let v = lu.get(i, k).abs();
                if v > max {
                    max = v;
                    p = i;
                }
            }
            if max == F::zero() {
                return None;
            }
            if p != k {
                for j in 0..n {
                    let tmp = lu.get(k, j);
                    lu.set(k, j, lu.get(p, j));
                    lu.set(p, j, tmp);
                }
                perm.swap(k, p);
                det = -det;
            }
            det *= lu.get(k, k);
            for i in (k + 1)..n {
                let factor = lu.get(i, k) / lu.get(k, k);
                lu.set(i, k, factor);
                for j in (k + 1)..n {
                    let v = lu.get(i, j) - factor * lu.get(k, j);
                    lu.set(i, j, v);
                }
            }
        }
        Some((lu, perm, det))
    }

    pub fn det(&self) -> F {
        match self.lu() {
            Some((_, _, d)) => d,
            None => F::zero(),
        }
    }

    /// Matrix inverse via LU; `None` when singular.
    pub fn inverse(&self) -> Option<Matrix<F>> {
        let n = self.rows;
        let (lu, perm, _) = self.lu()?;
        let mut inv = Matrix::zeros(n, n);
        let mut col = vec![F::zero(); n];
        for e in 0..n {
            for (i, c) in col.iter_mut().enumerate() {
                *c = if perm[i] == e { F::one() } else { F::zero() };
            }
            // forward substitution (unit lower triangle)
            for i in 0..n {
                for k in 0..i {
                    let s = lu.get(i, k) * col[k];
                    col[i] -= s;
                }
            }
            // back substitution
            for i in (0..n).rev() {
                for k in (i + 1)..n {
                    let s = lu.get(i, k) * col[k];
                    col[i] -= s;
                }
                col[i] /= lu.get(i, i);
            }
            for (i, c) in col.iter().enumerate() {
                inv.set(i, e, *c);
            }
        }
        Some(inv)
    }
}

/// Constant slow-diffusion coefficient: a positive scalar multiple of the
/// identity or a full `d x d` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma<F> {
    Scalar(F),
    Matrix(Vec<Vec<F>>),
}

impl<F: Scalar> Sigma<F> {
    /// `out = sigma * v` (noise synthesis).
    pub fn mul_vec(&self, v: &[F], out: &mut [F]) {
        match self {
            Sigma::Scalar(s) => {
                for (o, x) in out.iter_mut().zip(v) {
                    *o = *s * *x;
                }
            }
            Sigma::Matrix(rows) => {
                for (i, row) in rows.iter().enumerate() {
                    let mut acc = F::zero();
                    for (a, b) in row.iter().zip(v) {
                        acc += *a * *b;
                    }
                    out[i] = acc;
                }
            }
        }
    }

    fn as_matrix(&self, d: usize) -> Matrix<F> {
        match self {
            Sigma::Scalar(s) => {
                let mut m = Matrix::zeros(d, d);
                for i in 0..d {
                    m.set(i, i, *s);
                }
                m
            }
            Sigma::Matrix(rows) => {
                let refs: Vec<&[F]> = rows.iter().map(|r| r.as_slice()).collect();
                Matrix::from_rows(&refs)
            }
        }
    }

    /// Validate shape against the state dimension.
    pub fn validate(&self, d: usize) -> Result<(), Error> {
        match self {
            Sigma::Scalar(s) => {
                if !s.is_finite() {
                    return Err(Error::config("sigma must be finite"));
                }
            }
            Sigma::Matrix(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::config(format!(
                        "sigma matrix must be {d}x{d}, got {}x{}",
                        rows.len(),
                        rows.first().map_or(0, |r| r.len())
                    )));
                }
                if rows.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::config("sigma matrix entries must be finite"));
                }
            }
        }
        Ok(())
    }

    /// Precompute `A = sigma sigmaᵀ` data for the Gaussian transition density.
    ///
    /// Fails with a configuration error when `A` is singular.
    pub fn gaussian_terms(&self, d: usize) -> Result<GaussianTerms<F>, Error> {
        self.validate(d)?;
        let sigma = self.as_matrix(d);
        let a = sigma.aat();
        let det = a.det();
        if det <= F::zero() {
            return Err(Error::config("sigma sigma^T is singular; likelihood undefined"));
        }
        let a_inv = a.inverse().ok_or_else(|| Error::config("sigma sigma^T is singular"))?;
        Ok(GaussianTerms { d, a_inv, log_det_a: det.ln() })
    }
}

/// Cached quantities of `A = sigma sigmaᵀ` used by the likelihood.
#[derive(Debug, Clone)]
pub struct GaussianTerms<F> {
    pub d: usize,
    pub a_inv: Matrix<F>,
    pub log_det_a: F,
}

impl<F: Scalar> GaussianTerms<F> {
    /// Quadratic form `rᵀ A⁻¹ r`.
    pub fn quad_form(&self, r: &[F]) -> F {
        let mut tmp = vec![F::zero(); self.d];
        self.a_inv.mul_vec(r, &mut tmp);
        let mut acc = F::zero();
        for (a, b) in tmp.iter().zip(r) {
            acc += *a * *b;
        }
        acc
    }

    /// `out = A⁻¹ v`.
    pub fn a_inv_mul(&self, v: &[F], out: &mut [F]) {
        self.a_inv.mul_vec(v, out);
    }
}
