//! Squared-exponential ARD kernel primitives shared by the tape ops and the
//! GP layer.
//!
//! Hyperparameters enter as `w[c] = 1 / lengthscale_c^2` and `sig2` (signal
//! variance). Training inputs are kept in a column-major copy so the inner
//! loops stream one dimension at a time.

use crate::exec::{for_each_row, ExecMode};

/// Column-major copy of a row-major (n x d) matrix: d contiguous slices of
/// length n.
pub fn to_col_major(rows: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut cols = vec![0.0f64; n * d];
    for i in 0..n {
        for c in 0..d {
            cols[c * n + i] = rows[i * d + c];
        }
    }
    cols
}

/// One kernel row: out[j] = sig2 * exp(-0.5 * sum_c w[c] * (x[c] - B[j][c])^2)
/// against column-major `b_cols` (d slices of length n).
pub fn se_row(x: &[f64], b_cols: &[f64], n: usize, w: &[f64], sig2: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), n);
    out.fill(0.0);
    for (c, &wc) in w.iter().enumerate() {
        let xc = x[c];
        let col = &b_cols[c * n..(c + 1) * n];
        for (o, &bc) in out.iter_mut().zip(col.iter()) {
            let diff = xc - bc;
            *o += wc * diff * diff;
        }
    }
    for o in out.iter_mut() {
        *o = sig2 * (-0.5 * *o).exp();
    }
}

/// Full cross-kernel matrix K (m x n) between row-major A (m x d) and
/// column-major B columns.
pub fn se_matrix(
    mode: ExecMode,
    a: &[f64],
    b_cols: &[f64],
    m: usize,
    n: usize,
    d: usize,
    w: &[f64],
    sig2: f64,
) -> Vec<f64> {
    let mut k = vec![0.0f64; m * n];
    for_each_row(mode, &mut k, n, |i, row| {
        se_row(&a[i * d..(i + 1) * d], b_cols, n, w, sig2, row);
    });
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_scalar_definition() {
        let a = [0.3, -1.0, 2.0, 0.0, 0.5, 1.5];
        let b = [1.0, 0.0, -0.5, 2.0];
        let w = [0.7, 1.3];
        let sig2 = 2.25;
        let b_cols = to_col_major(&b, 2, 2);
        let k = se_matrix(ExecMode::Sequential, &a, &b_cols, 3, 2, 2, &w, sig2);
        for i in 0..3 {
            for j in 0..2 {
                let mut q = 0.0;
                for c in 0..2 {
                    let diff = a[i * 2 + c] - b[j * 2 + c];
                    q += w[c] * diff * diff;
                }
                let expect = sig2 * (-0.5 * q).exp();
                assert!((k[i * 2 + j] - expect).abs() < 1e-15);
            }
        }
    }
}
