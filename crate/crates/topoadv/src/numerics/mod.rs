//! Dense matrix plumbing: the shared matrix type, stable softmax, and the
//! central-difference gradient oracle every analytic gradient is tested
//! against.
//!
//! All numerics are 64-bit; the crate's acceptance tolerances assume it.

pub mod rng;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit reals. Rows are samples throughout the
/// crate: features are `n x m`, logits `n x C`, graphs `n x n`.
pub type Matrix = Array2<f64>;

/// Errors if any entry is NaN or infinite, naming the first offender.
pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    for ((i, j), &v) in m.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::non_finite(format!("{what}[{i}][{j}] = {v}")));
        }
    }
    Ok(())
}

/// Row-wise softmax with max-subtraction for overflow safety.
///
/// Each output row is nonnegative and sums to 1 within 1e-12. Total on finite
/// input: subtracting the row max keeps every exponent at or below zero.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Central finite-difference gradient of a scalar function of a matrix:
/// `g[i][j] = (f(x + h e_ij) - f(x - h e_ij)) / 2h`.
///
/// This is the independent oracle for every analytic gradient in the crate;
/// it deliberately shares no code with the reverse-mode tape.
pub fn finite_diff_grad<F>(mut scalar_fn: F, at: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::config(format!("finite_diff_grad: h must be > 0, got {h}")));
    }
    let mut x = at.clone();
    let mut grad = Matrix::zeros(at.raw_dim());
    for i in 0..at.nrows() {
        for j in 0..at.ncols() {
            let orig = x[[i, j]];

            x[[i, j]] = orig + h;
            let plus = scalar_fn(&x)?;
            x[[i, j]] = orig - h;
            let minus = scalar_fn(&x)?;
            x[[i, j]] = orig;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::non_finite(format!(
                    "finite_diff_grad: function value at entry [{i}][{j}] (f+ = {plus}, f- = {minus})"
                )));
            }
            grad[[i, j]] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Largest relative error between an analytic gradient and the oracle,
/// `|a - n| / max(1, |a|, |n|)`. Test helper used by the gradient suites.
pub fn max_rel_err(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.raw_dim(), numeric.raw_dim(), "gradient shapes differ");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}
