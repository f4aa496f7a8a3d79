//! Deterministic dense linear algebra, random sampling, and verification
//! primitives that every other module builds on.

pub mod matrix;
pub mod rng;

pub use matrix::{dgemm_strided, Matrix};
pub use rng::{box_muller, streams, SeededRng, RNG_ALGORITHM_ID};

use crate::error::{Error, Result};

/// Row-wise softmax with per-row max subtraction for overflow stability.
///
/// Rejects non-finite input: upstream code is expected to have dealt with
/// padding (by masking scores to `-inf` *and* renormalizing explicitly)
/// before probabilities are formed, so a NaN or infinity here is always a bug.
pub fn softmax_rows(s: &Matrix) -> Result<Matrix> {
    if !s.is_finite() {
        return Err(Error::NonFinite("softmax_rows input".into()));
    }
    let mut out = s.clone();
    for i in 0..out.rows() {
        softmax_row_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// Softmax of one score row, in place. Callers guarantee finite input.
#[inline]
pub(crate) fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Central finite difference `(f(x+h) − f(x−h)) / 2h`.
///
/// The workhorse oracle behind every gradient check in the crate.
pub fn finite_diff_derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite difference step must be positive, got {}",
            h
        )));
    }
    let hi = f(x + h);
    let lo = f(x - h);
    if !hi.is_finite() || !lo.is_finite() {
        return Err(Error::NonFinite(format!(
            "f({} ± {}) evaluated to ({}, {})",
            x, h, hi, lo
        )));
    }
    Ok((hi - lo) / (2.0 * h))
}

/// Frobenius distance `‖a − b‖_F`.
pub fn frobenius_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "frobenius_distance shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum.sqrt())
}
