//! Small dense linear-algebra helpers on top of nalgebra.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition numbers above this are logged.
pub const CONDITION_WARN: f64 = 1e12;

pub fn norm_max(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn vec_norm_max(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

fn norm_one(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverse by LU with partial pivoting. Logs a warning when the 1-norm
/// condition number exceeds [`CONDITION_WARN`].
pub fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("{what}: {}x{} is not square", m.nrows(), m.ncols())));
    }
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let inv = m
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    let cond = norm_one(m) * norm_one(&inv);
    if !cond.is_finite() {
        return Err(Error::Singular(what.to_string()));
    }
    if cond > CONDITION_WARN {
        warn!("{what}: condition number {cond:.3e} exceeds {CONDITION_WARN:.0e}");
    }
    Ok(inv)
}

/// Solve `m x = b` by LU with partial pivoting.
pub fn solve(m: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if m.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    m.clone()
        .lu()
        .solve(b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular(what.to_string()))
}

/// Numerical rank via column-pivoted QR, counting diagonal entries of R
/// above `rel_tol * ||m||_F`.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let scale = m.norm();
    if scale == 0.0 {
        return 0;
    }
    let r = m.clone().col_piv_qr().r();
    let k = r.nrows().min(r.ncols());
    (0..k).filter(|&i| r[(i, i)].abs() > rel_tol * scale).count()
}

/// Orthonormal basis (columns) of the kernel of a full-row-rank `m`.
///
/// Householder QR of `[mᵀ | I]` yields a full orthogonal factor whose
/// trailing `ncols - nrows` columns span the orthogonal complement of the
/// row space of `m`.
pub fn kernel_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (l, k) = m.shape();
    if k <= l {
        return DMatrix::zeros(k, 0);
    }
    let mut aug = DMatrix::zeros(k, l + k);
    aug.view_mut((0, 0), (k, l)).copy_from(&m.transpose());
    aug.view_mut((0, l), (k, k)).fill_with_identity();
    let q = aug.qr().q();
    q.columns(l, k - l).into_owned()
}

/// Lower Cholesky factor of a symmetric positive semidefinite matrix.
/// A tiny diagonal jitter is added when the plain factorisation fails.
pub fn psd_cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.l());
    }
    let scale = norm_max(m).max(f64::MIN_POSITIVE);
    let mut jitter = 1e-14 * scale;
    for _ in 0..8 {
        let shifted = m + DMatrix::identity(m.nrows(), m.nrows()) * jitter;
        if let Some(ch) = shifted.cholesky() {
            return Ok(ch.l());
        }
        jitter *= 100.0;
    }
    Err(Error::Numeric("matrix is not positive semidefinite".into()))
}

/// Symmetric part deviation `max |m - mᵀ|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    norm_max(&(m - m.transpose()))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}
