//! Positional encodings: absolute sinusoidal table and rotary (RoPE)
//! rotation of query/key head slices. (The ALiBi additive score bias lives
//! directly in the attention forward; its slope schedule is in `params`.)

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Absolute sinusoidal table: `P[t, 2i] = sin(t / 10000^{2i/D})`,
/// `P[t, 2i+1] = cos(t / 10000^{2i/D})`.
pub fn positional_encoding(len: usize, width: usize) -> Result<Matrix> {
    if width % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "sinusoidal encoding requires even width, got {}",
            width
        )));
    }
    Ok(Matrix::from_fn(len, width, |t, j| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / width as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// RoPE rotation angles for one head: `theta[t][i] = t · 10000^{−2i/dh}` for
/// pair index `i < dh/2`.
pub fn rope_angles(len: usize, head_dim: usize) -> Vec<Vec<f64>> {
    let half = head_dim / 2;
    (0..len)
        .map(|t| {
            (0..half)
                .map(|i| t as f64 * 10000f64.powf(-2.0 * i as f64 / head_dim as f64))
                .collect()
        })
        .collect()
}

/// Rotate consecutive pairs of one head slice in place. The slice is an
/// `L×head_dim` view into a wider row-major buffer (`row_stride` apart).
/// `sign = +1` applies the rotation (forward); `sign = −1` applies its
/// transpose (gradient pullback).
pub fn rope_rotate(
    buf: &mut [f64],
    offset: usize,
    len: usize,
    head_dim: usize,
    row_stride: usize,
    angles: &[Vec<f64>],
    sign: f64,
) {
    for t in 0..len {
        let row = offset + t * row_stride;
        for i in 0..head_dim / 2 {
            let (sin, cos) = (sign * angles[t][i]).sin_cos();
            let a = buf[row + 2 * i];
            let b = buf[row + 2 * i + 1];
            buf[row + 2 * i] = a * cos - b * sin;
            buf[row + 2 * i + 1] = a * sin + b * cos;
        }
    }
}
