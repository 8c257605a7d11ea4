//! Per-output exact Gaussian-process regression with the SE-ARD kernel.
//!
//! Hyperparameters are fitted by maximizing the log marginal likelihood with
//! Adam on log-parameters (gradients by reverse-mode AD through the Cholesky
//! factorization). Prediction runs off a precomputed cache: the weight
//! vector alpha = K_hat^{-1} y plus the stored Cholesky factor, and
//! optionally a low-rank root R with K_hat^{-1} ~= R R^T for cheap
//! variances. The analytic likelihood gradient is kept alongside purely as a
//! cross-check oracle for the autodiff path.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crate::array::Array;
use crate::container::{Container, ContainerError};
use crate::data::{Normalizer, TrainingPairs};
use crate::exec::ExecMode;
use crate::kernel;
use crate::linalg::{self, LinalgError};
use crate::optim::AdamState;
use crate::tape::{DiffError, GpSampleCtx, Tape, VariancePath};
use thiserror::Error;

/// Noise floor: sigma_n never drops below 1e-4.
pub const LOG_NOISE_FLOOR: f64 = -9.210340371976182; // ln(1e-4)

const JITTER_LADDER: [f64; 3] = [1e-8, 1e-6, 1e-4];

#[derive(Debug, Error)]
pub enum GpError {
    #[error("model is not fitted")]
    NotFitted,
    #[error(
        "cholesky failed after jitter escalation (pivot {pivot}, diagonal ratio ~{condition:.3e})"
    )]
    CholeskyFailed { pivot: usize, condition: f64 },
    #[error("likelihood became non-finite at step {step} after {halvings} step halvings")]
    NonFiniteLikelihood { step: usize, halvings: u32 },
    #[error("dimension mismatch: {what}")]
    Dim { what: String },
    #[error("variance root requested but not built")]
    NoRoot,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Log-space kernel hyperparameters. Exponentiation keeps the underlying
/// lengthscales, signal and noise strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub log_lengthscales: Vec<f64>,
    pub log_signal: f64,
    pub log_noise: f64,
}

impl Hyperparams {
    /// Defaults on normalized inputs: unit lengthscales and signal,
    /// noise std 0.1.
    pub fn init(d: usize) -> Self {
        Hyperparams {
            log_lengthscales: vec![0.0; d],
            log_signal: 0.0,
            log_noise: 0.1f64.ln(),
        }
    }

    pub fn new(log_lengthscales: Vec<f64>, log_signal: f64, log_noise: f64) -> Self {
        let mut hp = Hyperparams {
            log_lengthscales,
            log_signal,
            log_noise,
        };
        hp.clamp_noise();
        hp
    }

    pub fn clamp_noise(&mut self) {
        if self.log_noise < LOG_NOISE_FLOOR {
            self.log_noise = LOG_NOISE_FLOOR;
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    /// Inverse squared lengthscales.
    pub fn weights(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|&l| (-2.0 * l).exp()).collect()
    }

    pub fn signal_var(&self) -> f64 {
        (2.0 * self.log_signal).exp()
    }

    pub fn noise_var(&self) -> f64 {
        (2.0 * self.log_noise.max(LOG_NOISE_FLOOR)).exp()
    }
}

/// One single-output GP: training inputs, targets, hyperparameters.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub x: Arc<Array>,
    pub y: Vec<f64>,
    pub hp: Hyperparams,
    pub fitted: bool,
}

impl GpModel {
    pub fn new(x: Arc<Array>, y: Vec<f64>, hp: Hyperparams) -> Self {
        assert_eq!(x.nrows(), y.len(), "X rows must match y length");
        GpModel {
            x,
            y,
            hp,
            fitted: false,
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }
}

/// SE-ARD cross-kernel matrix between two row sets.
pub fn kernel_matrix(a: &Array, b: &Array, hp: &Hyperparams, mode: ExecMode) -> Result<Array, GpError> {
    if a.ncols() != b.ncols() || a.ncols() != hp.dim() {
        return Err(GpError::Dim {
            what: format!(
                "kernel inputs {:?} / {:?} with {} lengthscales",
                a.shape(),
                b.shape(),
                hp.dim()
            ),
        });
    }
    let (m, n, d) = (a.nrows(), b.nrows(), a.ncols());
    let b_cols = kernel::to_col_major(b.data(), n, d);
    let k = kernel::se_matrix(mode, a.data(), &b_cols, m, n, d, &hp.weights(), hp.signal_var());
    Ok(Array::matrix(m, n, k))
}

fn khat_dense(x: &Array, hp: &Hyperparams, mode: ExecMode) -> (Vec<f64>, f64) {
    let n = x.nrows();
    let d = x.ncols();
    let cols = kernel::to_col_major(x.data(), n, d);
    let mut k = kernel::se_matrix(mode, x.data(), &cols, n, n, d, &hp.weights(), hp.signal_var());
    let noise = hp.noise_var();
    for i in 0..n {
        k[i * n + i] += noise;
    }
    let mean_diag = hp.signal_var() + noise;
    (k, mean_diag)
}

/// Cholesky with the fixed jitter escalation ladder
/// {1e-8, 1e-6, 1e-4} x mean(diag). Returns (L, jitter actually added).
fn cholesky_with_jitter(
    khat: &[f64],
    n: usize,
    mean_diag: f64,
    mode: ExecMode,
) -> Result<(Vec<f64>, f64), GpError> {
    let mut last: Option<LinalgError> = None;
    for (attempt, eps) in std::iter::once(0.0).chain(JITTER_LADDER.iter().copied()).enumerate() {
        let jitter = eps * mean_diag;
        let mut l = khat.to_vec();
        if jitter > 0.0 {
            for i in 0..n {
                l[i * n + i] += jitter;
            }
        }
        match linalg::cholesky_in_place(mode, &mut l, n) {
            Ok(()) => return Ok((l, jitter)),
            Err(e) => {
                let _ = attempt;
                last = Some(e);
            }
        }
    }
    let (pivot, value) = match last {
        Some(LinalgError::NotPositiveDefinite { pivot, value }) => (pivot, value),
        None => (0, 0.0),
    };
    let max_diag = (0..n).map(|i| khat[i * n + i]).fold(0.0f64, f64::max);
    Err(GpError::CholeskyFailed {
        pivot,
        condition: max_diag / value.abs().max(1e-300),
    })
}

/// Log marginal likelihood of (X, y) under the kernel plus noise, via
/// Cholesky: -0.5 y^T K_hat^{-1} y - 0.5 log|K_hat| - (n/2) log 2 pi.
pub fn log_marginal_likelihood(
    x: &Array,
    y: &[f64],
    hp: &Hyperparams,
    mode: ExecMode,
) -> Result<f64, GpError> {
    let n = x.nrows();
    if y.len() != n {
        return Err(GpError::Dim {
            what: format!("{n} inputs vs {} targets", y.len()),
        });
    }
    let (khat, mean_diag) = khat_dense(x, hp, mode);
    let (l, _) = cholesky_with_jitter(&khat, n, mean_diag, mode)?;
    let mut v = y.to_vec();
    linalg::solve_lower_in_place(mode, &l, &mut v, n, 1);
    let quad: f64 = v.iter().map(|&a| a * a).sum();
    let logdet: f64 = 2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>();
    Ok(-0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Gradient of the log marginal likelihood with respect to the log
/// hyperparameters, in closed form. Used only as a cross-check oracle
/// against the autodiff path.
///
/// Returns (d/d log_lengthscales, d/d log_signal, d/d log_noise).
pub fn analytic_likelihood_gradient(
    x: &Array,
    y: &[f64],
    hp: &Hyperparams,
    mode: ExecMode,
) -> Result<(Vec<f64>, f64, f64), GpError> {
    let n = x.nrows();
    let d = x.ncols();
    let (khat, mean_diag) = khat_dense(x, hp, mode);
    let (l, _) = cholesky_with_jitter(&khat, n, mean_diag, mode)?;
    let linv = linalg::lower_inverse(mode, &l, n);
    let kinv = linalg::matmul_transpose_a(mode, &linv, &linv, n, n, n);
    let mut alpha = y.to_vec();
    linalg::solve_lower_in_place(mode, &l, &mut alpha, n, 1);
    linalg::solve_lower_transpose_in_place(mode, &l, &mut alpha, n, 1);

    // M = alpha alpha^T - K_hat^{-1}; dL/dphi = 0.5 tr(M dK_hat/dphi).
    let w = hp.weights();
    let sig2 = hp.signal_var();
    let noise = hp.noise_var();
    let xd = x.data();
    let mut g_len = vec![0.0f64; d];
    let mut g_sig = 0.0f64;
    let mut g_noise = 0.0f64;
    for i in 0..n {
        let mii = alpha[i] * alpha[i] - kinv[i * n + i];
        g_noise += mii;
        for j in 0..n {
            let m_ij = alpha[i] * alpha[j] - kinv[i * n + j];
            // noise-free kernel entry
            let mut q = 0.0;
            for (c, &wc) in w.iter().enumerate() {
                let diff = xd[i * d + c] - xd[j * d + c];
                q += wc * diff * diff;
            }
            let k_ij = sig2 * (-0.5 * q).exp();
            // d k / d log_l_c = k * w_c * diff_c^2 ; d K_hat / d log_sig = 2 K
            g_sig += m_ij * k_ij;
            for (c, &wc) in w.iter().enumerate() {
                let diff = xd[i * d + c] - xd[j * d + c];
                g_len[c] += 0.5 * m_ij * k_ij * wc * diff * diff;
            }
        }
    }
    g_noise *= noise; // 0.5 * tr(M * 2 sigma_n^2 I)
    Ok((g_len, g_sig, g_noise))
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub max_steps: usize,
    pub learning_rate: f64,
    pub grad_tol: f64,
    pub rel_tol: f64,
    pub rel_window: usize,
    pub max_halvings: u32,
    /// Fit hyperparameters on at most this many points (deterministic
    /// stride subset); 0 means use everything. The cache is always built on
    /// the full data.
    pub subset: usize,
    pub mode: ExecMode,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_steps: 500,
            learning_rate: 0.05,
            grad_tol: 1e-4,
            rel_tol: 1e-9,
            rel_window: 10,
            max_halvings: 5,
            subset: 512,
            mode: ExecMode::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub output: usize,
    pub initial_ll: f64,
    pub final_ll: f64,
    pub steps: usize,
    pub grad_inf_norm: f64,
    pub halvings: u32,
    pub n_fit: usize,
    pub fit_seconds: f64,
}

/// Negative log marginal likelihood on a tape; returns the loss node.
fn nll_tape(
    tape: &mut Tape,
    x: crate::tape::Var,
    y: crate::tape::Var,
    log_len: crate::tape::Var,
    log_sig: crate::tape::Var,
    log_noise: crate::tape::Var,
    jitter: f64,
    n: usize,
) -> Result<crate::tape::Var, DiffError> {
    let k = tape.se_ard(x, x, log_len, log_sig)?;
    let two_ln = tape.mul_scalar(log_noise, 2.0)?;
    let noise = tape.exp(two_ln)?;
    let mut khat = tape.add_scaled_identity(k, noise)?;
    if jitter > 0.0 {
        let j = tape.scalar(jitter);
        khat = tape.add_scaled_identity(khat, j)?;
    }
    let l = tape.cholesky(khat)?;
    let v = tape.solve_lower_tri(l, y, false)?;
    let sq = tape.square(v)?;
    let quad = tape.sum_all(sq)?;
    let dg = tape.diag(l)?;
    let ldg = tape.ln(dg)?;
    let sld = tape.sum_all(ldg)?;
    let half_quad = tape.mul_scalar(quad, 0.5)?;
    let partial = tape.add(half_quad, sld)?; // 0.5*quad + 0.5*(2 sum ln diag)
    tape.add_scalar(partial, 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

fn stride_subset(n: usize, target: usize) -> Vec<usize> {
    if target == 0 || n <= target {
        return (0..n).collect();
    }
    (0..target).map(|k| k * n / target).collect()
}

/// Fit one output's hyperparameters by Adam on the log parameters.
pub fn fit_output(
    x: &Array,
    y: &[f64],
    output: usize,
    cfg: &FitConfig,
) -> Result<(Hyperparams, FitReport), GpError> {
    let started = Instant::now();
    let n_all = x.nrows();
    let d = x.ncols();
    let idx = stride_subset(n_all, cfg.subset);
    let n = idx.len();
    let (x_fit, y_fit): (Array, Vec<f64>) = if n == n_all {
        (x.clone(), y.to_vec())
    } else {
        let mut xd = Vec::with_capacity(n * d);
        let mut yd = Vec::with_capacity(n);
        for &i in &idx {
            xd.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
            yd.push(y[i]);
        }
        (Array::matrix(n, d, xd), yd)
    };

    let mut hp = Hyperparams::init(d);
    let mut lr = cfg.learning_rate;
    let mut halvings = 0u32;
    let mut adam = AdamState::new(d + 2);
    let mut ll_history: Vec<f64> = Vec::new();
    let mut best = (f64::NEG_INFINITY, hp.clone());
    let mut initial_ll = f64::NAN;
    let mut last_grad_norm = f64::NAN;
    let mut steps_done = 0usize;

    for step in 0..cfg.max_steps {
        // Build the likelihood tape, escalating jitter on Cholesky failure.
        let mut result = None;
        let mut grads_result = None;
        for eps in std::iter::once(0.0).chain(JITTER_LADDER.iter().copied()) {
            let jitter = eps * (hp.signal_var() + hp.noise_var());
            let mut tape = Tape::with_mode(cfg.mode);
            let xv = tape.leaf(x_fit.clone());
            let yv = tape.leaf(Array::vector(&y_fit));
            let lv = tape.param(Array::vector(&hp.log_lengthscales));
            let sv = tape.param(Array::scalar(hp.log_signal));
            let nv = tape.param(Array::scalar(hp.log_noise));
            match nll_tape(&mut tape, xv, yv, lv, sv, nv, jitter, n) {
                Ok(loss) => {
                    let value = tape.value(loss).scalar_value();
                    let grads = tape.backward(loss)?;
                    let mut g = Vec::with_capacity(d + 2);
                    g.extend_from_slice(grads.for_param(lv, &[d]).data());
                    g.push(grads.for_param(sv, &[1]).scalar_value());
                    g.push(grads.for_param(nv, &[1]).scalar_value());
                    result = Some(-value);
                    grads_result = Some(g);
                    break;
                }
                Err(DiffError::Linalg(LinalgError::NotPositiveDefinite { .. })) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        let (Some(ll), Some(grad)) = (result, grads_result) else {
            // ladder exhausted
            let (khat, mean_diag) = khat_dense(&x_fit, &hp, cfg.mode);
            return match cholesky_with_jitter(&khat, n, mean_diag, cfg.mode) {
                Err(e) => Err(e),
                Ok(_) => unreachable!("ladder failed on tape but not densely"),
            };
        };

        if !ll.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            halvings += 1;
            if halvings > cfg.max_halvings {
                return Err(GpError::NonFiniteLikelihood { step, halvings });
            }
            lr *= 0.5;
            continue;
        }
        if step == 0 {
            initial_ll = ll;
        }
        if ll > best.0 {
            best = (ll, hp.clone());
        }
        ll_history.push(ll);
        steps_done = step + 1;

        let inf_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        last_grad_norm = inf_norm;
        if inf_norm < cfg.grad_tol {
            break;
        }
        if ll_history.len() > cfg.rel_window {
            let past = ll_history[ll_history.len() - 1 - cfg.rel_window];
            if (ll - past).abs() / past.abs().max(1.0) < cfg.rel_tol {
                break;
            }
        }

        let mut flat = hp.log_lengthscales.clone();
        flat.push(hp.log_signal);
        flat.push(hp.log_noise);
        adam.update(&mut flat, &grad, lr);
        hp.log_lengthscales = flat[..d].to_vec();
        hp.log_signal = flat[d];
        hp.log_noise = flat[d + 1];
        hp.clamp_noise();
    }

    let (final_ll, best_hp) = best;
    let report = FitReport {
        output,
        initial_ll,
        final_ll,
        steps: steps_done,
        grad_inf_norm: last_grad_norm,
        halvings,
        n_fit: n,
        fit_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((best_hp, report))
}

/// Precomputed prediction quantities for one output.
#[derive(Debug, Clone)]
pub struct PredictiveCache {
    pub chol: Arc<Vec<f64>>,
    pub alpha: Arc<Vec<f64>>,
    pub root: Option<RootCache>,
    pub jitter: f64,
    pub n: usize,
}

/// Rank-r root of K_hat^{-1} built from a landmark subset Z of the training
/// inputs: R = S_Z chol(K_ZZ + sigma_n^2 I)^{-T}, so R R^T is the
/// subset-of-data precision. Quadratic forms through R never exceed the
/// exact ones (the residual is PSD), so root-path variances are
/// conservative, and with r = n the root reproduces the exact path.
///
/// R has nonzero rows only at the landmarks; queries gather the landmark
/// entries of the kernel vector and do one r x r triangular solve.
#[derive(Debug, Clone)]
pub struct RootCache {
    pub landmarks: Arc<Vec<usize>>,
    /// Lower Cholesky factor of K_ZZ + sigma_n^2 I (+ jitter), r x r.
    pub chol_z: Arc<Vec<f64>>,
    pub rank: usize,
    /// Mean (var_root - var_exact) over probe training points; a measured
    /// accuracy diagnostic for the chosen rank.
    pub mean_excess_variance: f64,
}

/// Quadratic form k*^T (R R^T) k* through a subset root, given the full
/// kernel row. Writes the intermediate solve into `scratch` (length rank).
pub fn root_quad(root: &RootCache, krow: &[f64], scratch: &mut [f64]) -> f64 {
    let r = root.rank;
    for (s, &z) in scratch.iter_mut().zip(root.landmarks.iter()) {
        *s = krow[z];
    }
    // forward substitution with the r x r factor
    let l = root.chol_z.as_ref();
    for i in 0..r {
        let mut v = scratch[i];
        for t in 0..i {
            v -= l[i * r + t] * scratch[t];
        }
        scratch[i] = v / l[i * r + i];
    }
    scratch.iter().map(|&v| v * v).sum()
}

/// Build the predictive cache: Cholesky factor, alpha via two triangular
/// solves, and optionally a rank-r subset root of K_hat^{-1}.
pub fn build_cache(
    x: &Array,
    y: &[f64],
    hp: &Hyperparams,
    root_rank: usize,
    mode: ExecMode,
) -> Result<PredictiveCache, GpError> {
    let n = x.nrows();
    let d = x.ncols();
    let (khat, mean_diag) = khat_dense(x, hp, mode);
    let (l, jitter) = cholesky_with_jitter(&khat, n, mean_diag, mode)?;
    let mut alpha = y.to_vec();
    linalg::solve_lower_in_place(mode, &l, &mut alpha, n, 1);
    linalg::solve_lower_transpose_in_place(mode, &l, &mut alpha, n, 1);

    let root = if root_rank > 0 {
        let landmarks = stride_subset(n, root_rank.min(n));
        let r = landmarks.len();
        let mut xz = Vec::with_capacity(r * d);
        for &z in &landmarks {
            xz.extend_from_slice(&x.data()[z * d..(z + 1) * d]);
        }
        let xz = Array::matrix(r, d, xz);
        let (kzz, zdiag) = khat_dense(&xz, hp, mode);
        let (chol_z, _) = cholesky_with_jitter(&kzz, r, zdiag, mode)?;
        let root = RootCache {
            landmarks: Arc::new(landmarks),
            chol_z: Arc::new(chol_z),
            rank: r,
            mean_excess_variance: 0.0,
        };
        // Probe the excess variance on a spread of training inputs.
        let probes = stride_subset(n, 32.min(n));
        let mut kx = vec![0.0f64; n];
        let cols = kernel::to_col_major(x.data(), n, d);
        let w = hp.weights();
        let sig2 = hp.signal_var();
        let mut scratch = vec![0.0f64; r];
        let mut excess = 0.0f64;
        for &pi in &probes {
            kernel::se_row(&x.data()[pi * d..(pi + 1) * d], &cols, n, &w, sig2, &mut kx);
            let mut u = kx.clone();
            linalg::solve_lower_in_place(mode, &l, &mut u, n, 1);
            let exact_quad: f64 = u.iter().map(|&v| v * v).sum();
            let rq = root_quad(&root, &kx, &mut scratch);
            excess += (exact_quad - rq).max(0.0);
        }
        Some(RootCache {
            mean_excess_variance: excess / probes.len() as f64,
            ..root
        })
    } else {
        None
    };
    Ok(PredictiveCache {
        chol: Arc::new(l),
        alpha: Arc::new(alpha),
        root,
        jitter,
        n,
    })
}

/// Which variance computation `predict` uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceKind {
    Exact,
    Root,
}

const PREDICT_VAR_FLOOR: f64 = 1e-12;

/// Posterior mean and variance at each row of `xstar`, in the model's
/// (standardized-target) units.
pub fn predict(
    model: &GpModel,
    cache: &PredictiveCache,
    xstar: &Array,
    kind: VarianceKind,
    mode: ExecMode,
) -> Result<(Vec<f64>, Vec<f64>), GpError> {
    if !model.fitted {
        return Err(GpError::NotFitted);
    }
    if xstar.ncols() != model.d() {
        return Err(GpError::Dim {
            what: format!("test inputs {:?} vs d={}", xstar.shape(), model.d()),
        });
    }
    let (n, d, b) = (model.n(), model.d(), xstar.nrows());
    let cols = kernel::to_col_major(model.x.data(), n, d);
    let w = model.hp.weights();
    let sig2 = model.hp.signal_var();
    let kx = kernel::se_matrix(mode, xstar.data(), &cols, b, n, d, &w, sig2);
    let mut means = vec![0.0f64; b];
    crate::exec::for_each_row(mode, &mut means, 1, |i, out| {
        out[0] = linalg::dot(&kx[i * n..(i + 1) * n], &cache.alpha);
    });
    let mut vars = vec![0.0f64; b];
    match kind {
        VarianceKind::Exact => {
            let mut u = vec![0.0f64; n * b];
            for i in 0..b {
                for j in 0..n {
                    u[j * b + i] = kx[i * n + j];
                }
            }
            linalg::solve_lower_in_place(mode, &cache.chol, &mut u, n, b);
            for i in 0..b {
                let mut quad = 0.0;
                for j in 0..n {
                    let v = u[j * b + i];
                    quad += v * v;
                }
                vars[i] = (sig2 - quad).max(PREDICT_VAR_FLOOR);
            }
        }
        VarianceKind::Root => {
            let rc = cache.root.as_ref().ok_or(GpError::NoRoot)?;
            crate::exec::for_each_row(mode, &mut vars, 1, |i, out| {
                let krow = &kx[i * n..(i + 1) * n];
                let mut scratch = vec![0.0f64; rc.rank];
                let quad = root_quad(rc, krow, &mut scratch);
                out[0] = (sig2 - quad).max(PREDICT_VAR_FLOOR);
            });
        }
    }
    Ok((means, vars))
}

/// One fitted output of the ensemble.
#[derive(Debug, Clone)]
pub struct GpOutput {
    pub model: GpModel,
    pub cache: PredictiveCache,
    pub target_std: f64,
}

/// p independent single-output GPs sharing the same training inputs.
#[derive(Debug, Clone)]
pub struct GpEnsemble {
    pub x: Arc<Array>,
    pub xt_cols: Arc<Vec<f64>>,
    pub outputs: Vec<GpOutput>,
    pub normalizer: Normalizer,
    pub dt: f64,
}

impl GpEnsemble {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn p(&self) -> usize {
        self.outputs.len()
    }

    pub fn q(&self) -> usize {
        self.normalizer.q
    }

    /// Fit hyperparameters per output and build full-data caches.
    pub fn fit(
        pairs: &TrainingPairs,
        normalizer: Normalizer,
        dt: f64,
        fit_cfg: &FitConfig,
        root_rank: usize,
    ) -> Result<(Self, Vec<FitReport>), GpError> {
        let x = Arc::new(pairs.inputs.clone());
        let n = x.nrows();
        let d = x.ncols();
        let mut outputs = Vec::with_capacity(pairs.p);
        let mut reports = Vec::with_capacity(pairs.p);
        for m in 0..pairs.p {
            let y = pairs.target_column(m);
            let (hp, report) = fit_output(&x, &y, m, fit_cfg)?;
            let cache = build_cache(&x, &y, &hp, root_rank, fit_cfg.mode)?;
            let mut model = GpModel::new(Arc::clone(&x), y, hp);
            model.fitted = true;
            outputs.push(GpOutput {
                model,
                cache,
                target_std: pairs.target_stds[m],
            });
            reports.push(report);
        }
        let xt_cols = Arc::new(kernel::to_col_major(x.data(), n, d));
        Ok((
            GpEnsemble {
                x,
                xt_cols,
                outputs,
                normalizer,
                dt,
            },
            reports,
        ))
    }

    /// Scale taking a standardized GP target to a delta in normalized state
    /// units for output m.
    pub fn delta_scale_normalized(&self, m: usize) -> f64 {
        self.outputs[m].target_std / self.normalizer.std[m]
    }

    /// Sampling context for the fused rollout op. `scale` converts the
    /// standardized GP sample into the caller's delta units.
    pub fn sample_ctx(
        &self,
        m: usize,
        eps: Vec<f64>,
        scale: f64,
        kind: VarianceKind,
        mode: ExecMode,
        store_rows: bool,
    ) -> Result<Arc<GpSampleCtx>, GpError> {
        let out = &self.outputs[m];
        let variance = match kind {
            VarianceKind::Exact => VariancePath::Exact {
                chol: Arc::clone(&out.cache.chol),
            },
            VarianceKind::Root => {
                let rc = out.cache.root.as_ref().ok_or(GpError::NoRoot)?;
                VariancePath::Root {
                    landmarks: Arc::clone(&rc.landmarks),
                    chol_z: Arc::clone(&rc.chol_z),
                    rank: rc.rank,
                }
            }
        };
        Ok(Arc::new(GpSampleCtx {
            xt_cols: Arc::clone(&self.xt_cols),
            n: self.n(),
            d: self.d(),
            alpha: Arc::clone(&out.cache.alpha),
            variance,
            w: out.model.hp.weights(),
            sig2: out.model.hp.signal_var(),
            eps,
            scale,
            mode,
            store_rows,
        }))
    }

    pub fn save(&self, path: &Path) -> Result<(), GpError> {
        let mut c = Container::new();
        c.put_str("kind", "gp-ensemble");
        c.put_u64("p", self.p() as u64);
        c.put_u64("q", self.q() as u64);
        c.put_vec("dt", &[self.dt]);
        c.put_array("x", (*self.x).clone());
        c.put_vec("norm.mean", &self.normalizer.mean);
        c.put_vec("norm.std", &self.normalizer.std);
        c.put_vec(
            "norm.flagged",
            &self
                .normalizer
                .flagged
                .iter()
                .map(|&f| if f { 1.0 } else { 0.0 })
                .collect::<Vec<_>>(),
        );
        for (m, out) in self.outputs.iter().enumerate() {
            let pre = format!("gp{m}");
            c.put_vec(&format!("{pre}.y"), &out.model.y);
            c.put_vec(&format!("{pre}.log_len"), &out.model.hp.log_lengthscales);
            c.put_vec(
                &format!("{pre}.log_sig_noise"),
                &[out.model.hp.log_signal, out.model.hp.log_noise],
            );
            c.put_vec(&format!("{pre}.target_std"), &[out.target_std]);
            c.put_vec(&format!("{pre}.alpha"), &out.cache.alpha);
            c.put_array(
                &format!("{pre}.chol"),
                Array::matrix(out.cache.n, out.cache.n, out.cache.chol.as_ref().clone()),
            );
            c.put_vec(&format!("{pre}.jitter"), &[out.cache.jitter]);
            if let Some(rc) = &out.cache.root {
                c.put_vec(
                    &format!("{pre}.root_landmarks"),
                    &rc.landmarks.iter().map(|&z| z as f64).collect::<Vec<_>>(),
                );
                c.put_array(
                    &format!("{pre}.root_chol"),
                    Array::matrix(rc.rank, rc.rank, rc.chol_z.as_ref().clone()),
                );
                c.put_vec(&format!("{pre}.root_excess"), &[rc.mean_excess_variance]);
            }
        }
        c.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GpError> {
        let c = Container::load(path)?;
        if c.str("kind")? != "gp-ensemble" {
            return Err(GpError::Dim {
                what: format!("file is a `{}`, not a gp-ensemble", c.str("kind")?),
            });
        }
        let p = c.u64("p")? as usize;
        let q = c.u64("q")? as usize;
        let dt = c.vec("dt")?[0];
        let x = Arc::new(c.array("x")?.clone());
        let n = x.nrows();
        let d = x.ncols();
        let normalizer = Normalizer {
            mean: c.vec("norm.mean")?,
            std: c.vec("norm.std")?,
            flagged: c.vec("norm.flagged")?.iter().map(|&f| f != 0.0).collect(),
            p,
            q,
        };
        let mut outputs = Vec::with_capacity(p);
        for m in 0..p {
            let pre = format!("gp{m}");
            let y = c.vec(&format!("{pre}.y"))?;
            let sig_noise = c.vec(&format!("{pre}.log_sig_noise"))?;
            let hp = Hyperparams::new(
                c.vec(&format!("{pre}.log_len"))?,
                sig_noise[0],
                sig_noise[1],
            );
            let alpha = c.vec(&format!("{pre}.alpha"))?;
            let chol = c.array(&format!("{pre}.chol"))?.data().to_vec();
            let root = if c.has(&format!("{pre}.root_chol")) {
                let chol_arr = c.array(&format!("{pre}.root_chol"))?;
                Some(RootCache {
                    rank: chol_arr.ncols(),
                    landmarks: Arc::new(
                        c.vec(&format!("{pre}.root_landmarks"))?
                            .iter()
                            .map(|&z| z as usize)
                            .collect(),
                    ),
                    chol_z: Arc::new(chol_arr.data().to_vec()),
                    mean_excess_variance: c.vec(&format!("{pre}.root_excess"))?[0],
                })
            } else {
                None
            };
            let mut model = GpModel::new(Arc::clone(&x), y, hp);
            model.fitted = true;
            outputs.push(GpOutput {
                model,
                cache: PredictiveCache {
                    chol: Arc::new(chol),
                    alpha: Arc::new(alpha),
                    root,
                    jitter: c.vec(&format!("{pre}.jitter"))?[0],
                    n,
                },
                target_std: c.vec(&format!("{pre}.target_std"))?[0],
            });
        }
        let xt_cols = Arc::new(kernel::to_col_major(x.data(), n, d));
        Ok(GpEnsemble {
            x,
            xt_cols,
            outputs,
            normalizer,
            dt,
        })
    }
}
