//! Dense row-major matrices in 64-bit precision, the singular value
//! decomposition, and the norms and truncations built on it.
//!
//! The decomposition itself is delegated to `nalgebra`; this module fixes the
//! ordering and sign conventions so that results are reproducible.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense real matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::validation(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::validation(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "matrix {rows}x{cols} has a non-finite entry at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from a list of equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::validation("rows have differing lengths"));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Self::new(rows.len(), cols, data)
    }

    /// # Panics
    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Square diagonal matrix with `diag` on its diagonal.
    pub fn from_diag(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        for (i, &v) in diag.iter().enumerate() {
            data[i * n + i] = v;
        }
        Self::new(n, n, data)
    }

    /// Builds a matrix whose entries come from `f(row, col)`.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, col)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::validation(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: self.rows,
            cols: rhs.cols,
            data: out,
        })
    }

    fn zip_with(&self, rhs: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::validation(format!(
                "cannot {op} {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "subtract", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Multiplies column `j` by `factors[j]`, i.e. `self · diag(factors)`.
    pub fn scale_columns(&self, factors: &[f64]) -> Result<Matrix> {
        if factors.len() != self.cols {
            return Err(Error::validation(format!(
                "{} column factors for a matrix with {} columns",
                factors.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols) {
            for (v, f) in row.iter_mut().zip(factors) {
                *v *= f;
            }
        }
        Ok(out)
    }

    /// Multiplies row `i` by `factors[i]`, i.e. `diag(factors) · self`.
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Matrix> {
        if factors.len() != self.rows {
            return Err(Error::validation(format!(
                "{} row factors for a matrix with {} rows",
                factors.len(),
                self.rows
            )));
        }
        let mut out = self.clone();
        for (row, f) in out.data.chunks_mut(self.cols).zip(factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        Ok(out)
    }

    /// Horizontal concatenation `[self | rhs]`.
    pub fn hstack(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::validation(format!(
                "cannot place {}x{} beside {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let cols = self.cols + rhs.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(rhs.row(i));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Vertical concatenation `[self; rhs]`.
    pub fn vstack(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::validation(format!(
                "cannot stack {}x{} above {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&rhs.data);
        Ok(Matrix {
            rows: self.rows + rhs.rows,
            cols: self.cols,
            data,
        })
    }

    /// Largest absolute entry-wise difference; `f64::INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

/// Thin singular value decomposition `m = u · diag(sigma) · vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `rows × p` left singular vectors as columns.
    pub u: Matrix,
    /// Non-increasing singular values, `p = min(rows, cols)`.
    pub sigma: Vec<f64>,
    /// `cols × p` right singular vectors as columns.
    pub v: Matrix,
}

impl SvdFactors {
    /// Reassembles `u_k · diag(sigma_k) · v_kᵀ` from the leading `k` triplets.
    pub fn reconstruct(&self, k: usize) -> Matrix {
        let (rows, cols) = (self.u.rows(), self.v.rows());
        let mut data = vec![0.0; rows * cols];
        for t in 0..k.min(self.sigma.len()) {
            let s = self.sigma[t];
            if s == 0.0 {
                continue;
            }
            for i in 0..rows {
                let ui = self.u.get(i, t) * s;
                let out = &mut data[i * cols..(i + 1) * cols];
                for (j, o) in out.iter_mut().enumerate() {
                    *o += ui * self.v.get(j, t);
                }
            }
        }
        Matrix { rows, cols, data }
    }
}

/// Singular value decomposition with sorted singular values and a fixed
/// sign convention: the largest-magnitude entry of every left singular
/// vector is positive (first such entry on ties).
pub fn svd(m: &Matrix) -> Result<SvdFactors> {
    let (rows, cols) = m.shape();
    let p = rows.min(cols);
    let max_iters = 1_000 * p.max(1) + 10_000;
    let decomposed = m
        .to_nalgebra()
        .try_svd(true, true, f64::EPSILON, max_iters)
        .ok_or_else(|| Error::numeric(format!("SVD of {rows}x{cols} matrix did not converge")))?;
    let u = decomposed
        .u
        .ok_or_else(|| Error::numeric(format!("SVD of {rows}x{cols} matrix produced no U")))?;
    let v_t = decomposed
        .v_t
        .ok_or_else(|| Error::numeric(format!("SVD of {rows}x{cols} matrix produced no Vᵀ")))?;
    let raw_sigma = decomposed.singular_values;

    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| raw_sigma[b].total_cmp(&raw_sigma[a]).then(a.cmp(&b)));

    let mut u_data = vec![0.0; rows * p];
    let mut v_data = vec![0.0; cols * p];
    let mut sigma = Vec::with_capacity(p);
    for (t, &src) in order.iter().enumerate() {
        sigma.push(raw_sigma[src].max(0.0));
        let mut pivot = 0.0_f64;
        for i in 0..rows {
            let val = u[(i, src)];
            if val.abs() > pivot.abs() {
                pivot = val;
            }
        }
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..rows {
            u_data[i * p + t] = sign * u[(i, src)];
        }
        for j in 0..cols {
            v_data[j * p + t] = sign * v_t[(src, j)];
        }
    }
    Ok(SvdFactors {
        u: Matrix::new(rows, p, u_data)?,
        sigma,
        v: Matrix::new(cols, p, v_data)?,
    })
}

/// Best rank-`r` approximation `U_r Σ_r V_rᵀ` in the Frobenius norm.
pub fn best_rank_r(m: &Matrix, r: usize) -> Result<Matrix> {
    let p = m.rows().min(m.cols());
    if r == 0 || r > p {
        return Err(Error::validation(format!(
            "rank {r} out of range 1..={p} for a {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    Ok(svd(m)?.reconstruct(r))
}

/// Root-sum-square of the singular values discarded by a rank-`r` truncation.
pub fn tail_energy(sigma: &[f64], r: usize) -> Result<f64> {
    if r > sigma.len() {
        return Err(Error::validation(format!(
            "rank {r} exceeds the {} available singular values",
            sigma.len()
        )));
    }
    if let Some(i) = sigma.windows(2).position(|w| w[0] < w[1]) {
        return Err(Error::validation(format!(
            "singular values not sorted non-increasing at index {}",
            i + 1
        )));
    }
    if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::validation(
            "singular values must be finite and non-negative",
        ));
    }
    Ok(sigma[r..].iter().map(|s| s * s).sum::<f64>().sqrt())
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Sum of singular values.
pub fn nuclear_norm(m: &Matrix) -> Result<f64> {
    Ok(svd(m)?.sigma.iter().sum())
}

/// Number of singular values strictly above `tol`.
pub fn numerical_rank(m: &Matrix, tol: f64) -> Result<usize> {
    Ok(svd(m)?.sigma.iter().filter(|&&s| s > tol).count())
}
