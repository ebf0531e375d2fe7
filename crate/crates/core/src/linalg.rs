//! Small dense/sparse helpers shared by the posteriors.
//!
//! Dense factorizations go through `nalgebra`; the sparse type is a plain
//! compressed-row matrix that only supports what the tape needs.

use nalgebra::DMatrix;

use crate::error::Error;

/// Compressed sparse row matrix with `f64` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(column, value)` lists. Zero values are dropped.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for &(c, v) in row {
                assert!(c < cols, "column {c} out of range for {cols} columns");
                if v != 0.0 {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            rows: rows.len(),
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn from_dense(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols);
        let lists: Vec<Vec<(usize, f64)>> = (0..rows)
            .map(|r| {
                (0..cols)
                    .filter_map(|c| {
                        let v = data[r * cols + c];
                        (v != 0.0).then_some((c, v))
                    })
                    .collect()
            })
            .collect();
        Self::from_rows(cols, &lists)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `out = self * x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `out += self^T * y`
    pub fn mul_transpose_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (c, v) in self.row(r) {
                out[c] += v * yr;
            }
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[r * self.cols + c] += v;
            }
        }
        out
    }
}

/// Row-major dense matrix into nalgebra.
pub fn to_dmatrix(n_rows: usize, n_cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(n_rows, n_cols, data)
}

/// `log |det A|` and the sign of the determinant, via partial-pivot LU.
pub fn log_abs_det(n: usize, data: &[f64]) -> (f64, f64) {
    let lu = to_dmatrix(n, n, data).lu();
    let u = lu.u();
    let mut log_abs = 0.0;
    let mut sign = 1.0;
    for i in 0..n {
        let d = u[(i, i)];
        if d == 0.0 {
            return (f64::NEG_INFINITY, 0.0);
        }
        log_abs += d.abs().ln();
        if d < 0.0 {
            sign = -sign;
        }
    }
    // Each row swap flips the sign.
    if lu.p().len() % 2 == 1 {
        sign = -sign;
    }
    (log_abs, sign)
}

/// `log det A` for a matrix known to have positive determinant.
pub fn log_det_positive(n: usize, data: &[f64]) -> Result<f64, Error> {
    let (log_abs, sign) = log_abs_det(n, data);
    if sign <= 0.0 || !log_abs.is_finite() {
        return Err(Error::Singular(format!(
            "determinant is not positive (sign {sign}, log|det| {log_abs})"
        )));
    }
    Ok(log_abs)
}

/// Row-major inverse.
pub fn inverse(n: usize, data: &[f64]) -> Option<Vec<f64>> {
    let inv = to_dmatrix(n, n, data).try_inverse()?;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = inv[(i, j)];
        }
    }
    Some(out)
}

/// Lower Cholesky factor of a symmetric positive-definite matrix, row-major.
pub fn cholesky_lower(n: usize, data: &[f64]) -> Option<Vec<f64>> {
    let chol = to_dmatrix(n, n, data).cholesky()?;
    let l = chol.l();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            out[i * n + j] = l[(i, j)];
        }
    }
    Some(out)
}

/// Inverse of a lower-triangular matrix by forward substitution.
pub fn lower_triangular_inverse(n: usize, l: &[f64]) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    for col in 0..n {
        for i in col..n {
            let mut acc = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                acc -= l[i * n + k] * inv[k * n + col];
            }
            inv[i * n + col] = acc / l[i * n + i];
        }
    }
    inv
}

/// Dense LU solver for repeated right-hand sides.
#[derive(Debug, Clone)]
pub struct LuSolver {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl LuSolver {
    pub fn new(n: usize, data: &[f64]) -> Result<Self, Error> {
        let lu = to_dmatrix(n, n, data).lu();
        if !lu.is_invertible() {
            return Err(Error::Singular("LU factorization is singular".into()));
        }
        Ok(LuSolver { lu })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = nalgebra::DVector::from_column_slice(b);
        self.lu
            .solve(&rhs)
            .expect("invertibility checked at construction")
            .as_slice()
            .to_vec()
    }

    /// Solves `A^T x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        // A = P^T L U  =>  A^T = U^T L^T P
        let n = b.len();
        let l = self.lu.l();
        let u = self.lu.u();
        let mut y = b.to_vec();
        // U^T z = b (forward)
        for i in 0..n {
            let mut acc = y[i];
            for k in 0..i {
                acc -= u[(k, i)] * y[k];
            }
            y[i] = acc / u[(i, i)];
        }
        // L^T w = z (backward, unit diagonal)
        for i in (0..n).rev() {
            let mut acc = y[i];
            for k in i + 1..n {
                acc -= l[(k, i)] * y[k];
            }
            y[i] = acc;
        }
        // x = P^T w
        let mut x = nalgebra::DVector::from_column_slice(&y);
        self.lu.p().inv_permute_rows(&mut x);
        x.as_slice().to_vec()
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of `scale * xs`.
pub fn softmax(xs: &[f64], scale: f64) -> Vec<f64> {
    let scaled: Vec<f64> = xs.iter().map(|x| scale * x).collect();
    let lse = logsumexp(&scaled);
    scaled.iter().map(|x| (x - lse).exp()).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
