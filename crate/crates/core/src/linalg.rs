//! Dense kernels: matmul variants, blocked Cholesky, triangular solves and a
//! pivoted partial root of the inverse.
//!
//! Matrices are row-major `&[f64]` with explicit dimensions. Every parallel
//! loop owns disjoint output rows (or an owned right-hand-side block), so
//! results are bit-identical across `ExecMode`s and thread counts.

use crate::exec::{for_each_row, ExecMode};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot}, value {value:.3e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
}

/// C = A(m x k) * B(k x n).
pub fn matmul(mode: ExecMode, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f64; m * n];
    for_each_row(mode, &mut c, n, |i, crow| {
        let arow = &a[i * k..(i + 1) * k];
        for t in 0..k {
            let av = arow[t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    });
    c
}

/// C = A(m x k) * B(n x k)^T, i.e. C[i][j] = dot(A row i, B row j).
pub fn matmul_transpose_b(
    mode: ExecMode,
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0f64; m * n];
    for_each_row(mode, &mut c, n, |i, crow| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv = dot(arow, &b[j * k..(j + 1) * k]);
        }
    });
    c
}

/// C = A(m x k)^T * B(m x n), i.e. C[t][j] = sum_i A[i][t] * B[i][j].
pub fn matmul_transpose_a(
    mode: ExecMode,
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![0.0f64; k * n];
    for_each_row(mode, &mut c, n, |t, crow| {
        for i in 0..m {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    });
    c
}

/// y = A(m x k) * x(k).
pub fn matvec(mode: ExecMode, a: &[f64], x: &[f64], m: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(x.len(), k);
    let mut y = vec![0.0f64; m];
    for_each_row(mode, &mut y, 1, |i, out| {
        out[0] = dot(&a[i * k..(i + 1) * k], x);
    });
    y
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators keep the FMA pipeline busy and fix the summation
    // order independently of caller context.
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0f64;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

const CHOL_BLOCK: usize = 64;

/// In-place lower Cholesky of a symmetric positive-definite matrix.
///
/// Only the lower triangle of `a` is read; on success the lower triangle
/// holds L and the strict upper triangle is zeroed. Blocked right-looking
/// with a row-parallel trailing update.
pub fn cholesky_in_place(mode: ExecMode, a: &mut [f64], n: usize) -> Result<(), LinalgError> {
    debug_assert_eq!(a.len(), n * n);
    let mut kb = 0usize;
    while kb < n {
        let bs = CHOL_BLOCK.min(n - kb);
        // Factor the diagonal block. Earlier panels already subtracted their
        // contributions during trailing updates, so only columns within the
        // block matter here.
        for j in kb..kb + bs {
            let d = a[j * n + j] - dot(&a[j * n + kb..j * n + j], &a[j * n + kb..j * n + j]);
            if d <= 0.0 || !d.is_finite() {
                return Err(LinalgError::NotPositiveDefinite { pivot: j, value: d });
            }
            let ljj = d.sqrt();
            a[j * n + j] = ljj;
            for i in j + 1..kb + bs {
                let s = dot(&a[i * n + kb..i * n + j], &a[j * n + kb..j * n + j]);
                a[i * n + j] = (a[i * n + j] - s) / ljj;
            }
        }
        let next = kb + bs;
        if next < n {
            // Panel solve: L21 = A21 * L11^{-T}, one independent task per row.
            let diag: Vec<f64> = a[kb * n..next * n].to_vec();
            let (_, below) = a.split_at_mut(next * n);
            for_each_row(mode, below, n, |_, row| {
                for j in 0..bs {
                    let mut s = row[kb + j];
                    for t in 0..j {
                        s -= row[kb + t] * diag[j * n + kb + t];
                    }
                    row[kb + j] = s / diag[j * n + kb + j];
                }
            });
            // Trailing update: A22 -= L21 * L21^T, lower triangle only.
            let rows_below = n - next;
            let mut panel = vec![0.0f64; rows_below * bs];
            for i in 0..rows_below {
                panel[i * bs..(i + 1) * bs]
                    .copy_from_slice(&a[(next + i) * n + kb..(next + i) * n + next]);
            }
            let (_, trail) = a.split_at_mut(next * n);
            for_each_row(mode, trail, n, |ri, row| {
                let pi = &panel[ri * bs..(ri + 1) * bs];
                for j in next..=next + ri {
                    let pj = &panel[(j - next) * bs..(j - next + 1) * bs];
                    row[j] -= dot(pi, pj);
                }
            });
        }
        kb = next;
    }
    for i in 0..n {
        for j in i + 1..n {
            a[i * n + j] = 0.0;
        }
    }
    Ok(())
}

fn rhs_block(m: usize) -> usize {
    if m <= 16 {
        m.max(1)
    } else {
        (m / 8).max(16)
    }
}

fn solve_blocked(
    mode: ExecMode,
    b: &mut [f64],
    n: usize,
    m: usize,
    solve_block: impl Fn(&mut [f64], usize) + Sync + Send,
) {
    let block = rhs_block(m);
    if block == m {
        solve_block(b, m);
        return;
    }
    let starts: Vec<usize> = (0..m).step_by(block).collect();
    let mut buffers: Vec<(usize, usize, Vec<f64>)> = starts
        .iter()
        .map(|&c0| {
            let bw = block.min(m - c0);
            let mut buf = vec![0.0f64; n * bw];
            for i in 0..n {
                buf[i * bw..(i + 1) * bw].copy_from_slice(&b[i * m + c0..i * m + c0 + bw]);
            }
            (c0, bw, buf)
        })
        .collect();
    let solve_ref = &solve_block;
    match mode {
        ExecMode::Sequential => {
            for (_, bw, buf) in buffers.iter_mut() {
                solve_ref(buf, *bw);
            }
        }
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                buffers
                    .par_iter_mut()
                    .for_each(|(_, bw, buf)| solve_ref(buf, *bw));
            }
            #[cfg(not(feature = "parallel"))]
            for (_, bw, buf) in buffers.iter_mut() {
                solve_ref(buf, *bw);
            }
        }
    }
    for (c0, bw, buf) in buffers {
        for i in 0..n {
            b[i * m + c0..i * m + c0 + bw].copy_from_slice(&buf[i * bw..(i + 1) * bw]);
        }
    }
}

/// Solve L * Y = B in place; B is n x m row-major, L lower triangular n x n.
pub fn solve_lower_in_place(mode: ExecMode, l: &[f64], b: &mut [f64], n: usize, m: usize) {
    debug_assert_eq!(l.len(), n * n);
    debug_assert_eq!(b.len(), n * m);
    solve_blocked(mode, b, n, m, |buf, bw| {
        for i in 0..n {
            let (done, rest) = buf.split_at_mut(i * bw);
            let row_i = &mut rest[..bw];
            let lrow = &l[i * n..i * n + i];
            for (t, &lit) in lrow.iter().enumerate() {
                if lit == 0.0 {
                    continue;
                }
                let row_t = &done[t * bw..(t + 1) * bw];
                for (x, &y) in row_i.iter_mut().zip(row_t.iter()) {
                    *x -= lit * y;
                }
            }
            let inv = 1.0 / l[i * n + i];
            for x in row_i.iter_mut() {
                *x *= inv;
            }
        }
    });
}

/// Solve L^T * Y = B in place; B is n x m row-major.
pub fn solve_lower_transpose_in_place(
    mode: ExecMode,
    l: &[f64],
    b: &mut [f64],
    n: usize,
    m: usize,
) {
    debug_assert_eq!(l.len(), n * n);
    debug_assert_eq!(b.len(), n * m);
    solve_blocked(mode, b, n, m, |buf, bw| {
        for ii in 0..n {
            let i = n - 1 - ii;
            let (head, rest) = buf.split_at_mut((i + 1) * bw);
            let row_i = &mut head[i * bw..];
            for t in i + 1..n {
                let lti = l[t * n + i];
                if lti == 0.0 {
                    continue;
                }
                let row_t = &rest[(t - i - 1) * bw..(t - i) * bw];
                for (x, &y) in row_i.iter_mut().zip(row_t.iter()) {
                    *x -= lti * y;
                }
            }
            let inv = 1.0 / l[i * n + i];
            for x in row_i.iter_mut() {
                *x *= inv;
            }
        }
    });
}

/// Explicit inverse of a lower triangular matrix (row-major, n x n).
pub fn lower_inverse(mode: ExecMode, l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0f64; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    solve_lower_in_place(mode, l, &mut inv, n, n);
    inv
}
