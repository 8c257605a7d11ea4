//! Sequential/parallel execution dispatch.
//!
//! Hot loops are written as per-row closures over disjoint output slices, so
//! the parallel path is bit-identical to the sequential one: each row is
//! produced by exactly one task and no floating-point reduction order ever
//! changes. Built without the `parallel` feature, `Parallel` silently runs
//! the sequential fallback.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

impl ExecMode {
    pub fn label(self) -> &'static str {
        match self {
            ExecMode::Sequential => "sequential",
            ExecMode::Parallel => "parallel",
        }
    }
}

/// Apply `f(i, row)` to each `row_len` chunk of `out`.
pub fn for_each_row(
    mode: ExecMode,
    out: &mut [f64],
    row_len: usize,
    f: impl Fn(usize, &mut [f64]) + Sync + Send,
) {
    debug_assert_eq!(out.len() % row_len.max(1), 0);
    match mode {
        ExecMode::Sequential => {
            for (i, row) in out.chunks_mut(row_len).enumerate() {
                f(i, row);
            }
        }
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                out.par_chunks_mut(row_len)
                    .enumerate()
                    .for_each(|(i, row)| f(i, row));
            }
            #[cfg(not(feature = "parallel"))]
            {
                for (i, row) in out.chunks_mut(row_len).enumerate() {
                    f(i, row);
                }
            }
        }
    }
}

/// Run `f(i)` for every index in `0..n`, parallelizing when asked.
pub fn for_each_index(mode: ExecMode, n: usize, f: impl Fn(usize) + Sync + Send) {
    match mode {
        ExecMode::Sequential => {
            for i in 0..n {
                f(i);
            }
        }
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                (0..n).into_par_iter().for_each(f);
            }
            #[cfg(not(feature = "parallel"))]
            {
                for i in 0..n {
                    f(i);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential() {
        let work = |i: usize, row: &mut [f64]| {
            let mut acc = 0.0f64;
            for k in 0..row.len() {
                acc += ((i * 31 + k) as f64).sin();
                row[k] = acc;
            }
        };
        let mut a = vec![0.0; 64 * 17];
        let mut b = vec![0.0; 64 * 17];
        for_each_row(ExecMode::Sequential, &mut a, 17, work);
        for_each_row(ExecMode::Parallel, &mut b, 17, work);
        assert_eq!(a, b);
    }
}
