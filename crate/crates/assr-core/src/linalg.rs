//! Dense symmetric positive-definite factorization and triangular solves,
//! sized for kernel matrices of a few hundred rows.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor L with A = L·Lᵀ.
pub fn cholesky(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: a.ncols(),
        });
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        // The factor rows are built left to right, so the slices below are
        // fully initialized by the time they are read.
        let mut d = a[[j, j]];
        {
            let row_j = l.row(j);
            let row_j = row_j.slice(ndarray::s![..j]);
            d -= row_j.dot(&row_j);
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: d, row: j });
        }
        let diag = d.sqrt();
        l[[j, j]] = diag;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            {
                let row_i = l.row(i);
                let row_j = l.row(j);
                s -= row_i
                    .slice(ndarray::s![..j])
                    .dot(&row_j.slice(ndarray::s![..j]));
            }
            l[[i, j]] = s / diag;
        }
    }
    Ok(l)
}

/// Solves L·x = b by forward substitution.
pub fn solve_lower(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        let partial = l.row(i).slice(ndarray::s![..i]).dot(&x.slice(ndarray::s![..i]));
        x[i] = (x[i] - partial) / l[[i, i]];
    }
    x
}

/// Solves Lᵀ·x = b by back substitution against the stored lower factor.
pub fn solve_lower_transposed(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves A·x = b given A's Cholesky factor.
pub fn chol_solve(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    solve_lower_transposed(l, solve_lower(l, b).view())
}
