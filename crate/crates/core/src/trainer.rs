//! Policy training: batched rollouts through the GP posterior, reward
//! accumulation, reverse-mode gradients and Adam updates.
//!
//! Everything inside a rollout lives in normalized coordinates. Per rollout
//! step the policy acts, the action is normalized into GP input units, each
//! output GP contributes a reparameterized sampled delta, and the reward of
//! the new state accrues into the return. The whole pass sits on one tape;
//! the loss is the negated batch-mean return.
//!
//! Sampling noise is addressed by (iteration, step, row id, output), so a
//! single-row rollout replays exactly the same draws as the matching row of
//! a batched rollout, and chunked evaluation accumulates identical gradients
//! in a fixed order.

use std::io::Write;
use std::time::Instant;

use crate::array::Array;
use crate::data::Normalizer;
use crate::exec::ExecMode;
use crate::gp::{GpEnsemble, GpError, VarianceKind};
use crate::policy::{MlpPolicy, PolicyError};
use crate::rng::{keyed_normal, StreamRng};
use crate::tape::{DiffError, Tape, Var};
use thiserror::Error;

pub use crate::optim::AdamState;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("non-finite state at rollout step {step}, row {row}")]
    NonFiniteState { step: usize, row: usize },
    #[error("{count} consecutive non-finite gradients at step {step}; aborting")]
    TooManyNonFiniteGrads { step: usize, count: usize },
    #[error("dimension mismatch: {what}")]
    Dim { what: String },
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Reward shape: exp(-(1/2 sigma_r^2) * sum_c Q_cc (s_c - g_c)^2).
#[derive(Debug, Clone)]
pub struct RewardParams {
    pub q_diag: Vec<f64>,
    pub sigma_r: f64,
}

impl RewardParams {
    pub fn new(q_diag: Vec<f64>, sigma_r: f64) -> Self {
        assert!(sigma_r > 0.0);
        assert!(q_diag.iter().all(|&q| q >= 0.0) && q_diag.iter().any(|&q| q > 0.0));
        RewardParams { q_diag, sigma_r }
    }

    /// The weights used in the boom experiments.
    pub fn boom_default() -> Self {
        RewardParams::new(vec![10.0, 0.1], 1.0)
    }
}

/// Reward of each batch row, on the tape.
pub fn reward_on_tape(
    tape: &mut Tape,
    states: Var,
    goals: Var,
    rp: &RewardParams,
) -> Result<Var, DiffError> {
    let p = rp.q_diag.len();
    let e = tape.sub(states, goals)?;
    let sq = tape.square(e)?;
    let qrow = tape.leaf(Array::new(vec![1, p], rp.q_diag.clone()));
    let weighted = tape.mul(sq, qrow)?;
    let summed = tape.sum_axis(weighted, 1)?;
    let scaled = tape.mul_scalar(summed, -0.5 / (rp.sigma_r * rp.sigma_r))?;
    tape.exp(scaled)
}

/// Plain single-row reward.
pub fn reward_row(s: &[f64], g: &[f64], rp: &RewardParams) -> f64 {
    let q: f64 = s
        .iter()
        .zip(g.iter())
        .zip(rp.q_diag.iter())
        .map(|((&sv, &gv), &qc)| qc * (sv - gv) * (sv - gv))
        .sum();
    (-0.5 * q / (rp.sigma_r * rp.sigma_r)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Fixed,
    Uniform,
}

impl SampleMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fixed" => Some(SampleMode::Fixed),
            "uniform" => Some(SampleMode::Uniform),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub horizon: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub init_state_mode: SampleMode,
    pub goal_mode: SampleMode,
    /// Physical coordinates; normalized internally.
    pub fixed_init: Vec<f64>,
    pub fixed_goal: Vec<f64>,
    /// Physical per-dimension bounds for uniform sampling.
    pub state_bounds: Vec<(f64, f64)>,
    pub goal_bounds: Vec<(f64, f64)>,
    /// Rows per chunk; 0 sizes chunks from the memory budget.
    pub chunk_size: usize,
    /// Working-set budget for retained kernel rows, in MiB.
    pub memory_budget_mb: usize,
    pub variance: VarianceKind,
    pub mode: ExecMode,
    /// Early stop: relative improvement of the `stop_window`-step moving
    /// average of mean return falls below `stop_rel_tol`.
    pub stop_window: usize,
    pub stop_rel_tol: f64,
    /// Optional wall-clock budget in seconds (0 = none).
    pub max_wall_s: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            horizon: 300,
            learning_rate: 1e-2,
            max_steps: 100,
            seed: 0,
            init_state_mode: SampleMode::Fixed,
            goal_mode: SampleMode::Fixed,
            fixed_init: vec![-0.9, 0.0],
            fixed_goal: vec![0.0, 0.0],
            state_bounds: Vec::new(),
            goal_bounds: Vec::new(),
            chunk_size: 0,
            memory_budget_mb: 1536,
            variance: VarianceKind::Root,
            mode: ExecMode::default(),
            stop_window: 10,
            stop_rel_tol: 1e-5,
            max_wall_s: 0.0,
        }
    }
}

/// Trajectories realized during one optimization step.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    /// Normalized states, H+1 arrays of (b x p).
    pub states: Vec<Array>,
    /// Policy actions, H arrays of (b x q).
    pub actions: Vec<Array>,
    /// Per-step rewards, H+1 vectors of length b.
    pub rewards: Vec<Vec<f64>>,
    /// Accumulated return per trajectory.
    pub returns: Vec<f64>,
    /// Batch mean of return / (H + 1), in (0, 1].
    pub mean_return_per_step: f64,
}

pub struct RolloutOutput {
    pub batch: RolloutBatch,
    pub loss: Var,
}

/// Bytes of kernel rows retained per trajectory row when the fused GP op
/// stores them for backward.
pub fn rollout_row_bytes(horizon: usize, outputs: usize, n_train: usize) -> usize {
    horizon * outputs * n_train * 8
}

/// Build one batched rollout on `tape`. `row_ids` addresses the noise
/// substreams; `loss_rows` is the total row count of the objective so that
/// chunks of a larger batch scale their partial losses consistently.
#[allow(clippy::too_many_arguments)]
pub fn rollout_batch(
    tape: &mut Tape,
    ensemble: &GpEnsemble,
    policy: &MlpPolicy,
    policy_vars: &[Var],
    s0_norm: &Array,
    goals_norm: &Array,
    horizon: usize,
    eps_key: u64,
    row_ids: &[u64],
    reward: &RewardParams,
    variance: VarianceKind,
    loss_rows: usize,
    store_rows: bool,
) -> Result<RolloutOutput, TrainerError> {
    let b = s0_norm.nrows();
    let p = ensemble.p();
    let q = ensemble.q();
    if goals_norm.nrows() != b || goals_norm.ncols() != p || row_ids.len() != b {
        return Err(TrainerError::Dim {
            what: format!(
                "rollout batch: s0 {:?}, goals {:?}, {} row ids",
                s0_norm.shape(),
                goals_norm.shape(),
                row_ids.len()
            ),
        });
    }
    if policy.state_dim != p || policy.action_dim() != q {
        return Err(TrainerError::Dim {
            what: format!(
                "policy ({} states -> {} actions) vs model ({p} states, {q} actions)",
                policy.state_dim,
                policy.action_dim()
            ),
        });
    }

    // Constants for normalizing policy actions into GP input units.
    let norm = &ensemble.normalizer;
    let act_mean = tape.leaf(Array::new(
        vec![1, q],
        norm.mean[p..p + q].to_vec(),
    ));
    let act_std = tape.leaf(Array::new(vec![1, q], norm.std[p..p + q].to_vec()));

    let goals = tape.leaf(goals_norm.clone());
    let mut state = tape.leaf(s0_norm.clone());

    let mut states = vec![s0_norm.clone()];
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon + 1);

    let r0 = reward_on_tape(tape, state, goals, reward)?;
    rewards.push(tape.value(r0).data().to_vec());
    let mut g_acc = r0;

    for k in 0..horizon {
        let action = policy.act_tape(
            tape,
            policy_vars,
            state,
            if policy.goal_conditioned { Some(goals) } else { None },
        )?;
        actions.push(tape.value(action).clone());
        let a_centered = tape.sub(action, act_mean)?;
        let a_norm = tape.div(a_centered, act_std)?;
        let xs = tape.concat(&[state, a_norm], 1)?;

        let mut delta_cols = Vec::with_capacity(p);
        for m in 0..p {
            let eps: Vec<f64> = row_ids
                .iter()
                .map(|&rid| keyed_normal(eps_key, &[k as u64, rid, m as u64]))
                .collect();
            let ctx = ensemble.sample_ctx(
                m,
                eps,
                ensemble.delta_scale_normalized(m),
                variance,
                tape.mode(),
                store_rows,
            )?;
            let delta = tape.gp_sample_delta(xs, ctx)?;
            delta_cols.push(tape.reshape(delta, &[b, 1])?);
        }
        let delta_mat = tape.concat(&delta_cols, 1)?;
        state = tape.add(state, delta_mat)?;

        let sval = tape.value(state);
        if !sval.all_finite() {
            let row = (0..b)
                .find(|&i| sval.row(i).iter().any(|v| !v.is_finite()))
                .unwrap_or(0);
            return Err(TrainerError::NonFiniteState { step: k, row });
        }
        states.push(sval.clone());

        let r = reward_on_tape(tape, state, goals, reward)?;
        rewards.push(tape.value(r).data().to_vec());
        g_acc = tape.add(g_acc, r)?;
    }

    let returns = tape.value(g_acc).data().to_vec();
    let mean_return_per_step =
        returns.iter().sum::<f64>() / b as f64 / (horizon + 1) as f64;
    let total = tape.sum_all(g_acc)?;
    let loss = tape.mul_scalar(total, -1.0 / loss_rows as f64)?;
    Ok(RolloutOutput {
        batch: RolloutBatch {
            states,
            actions,
            rewards,
            returns,
            mean_return_per_step,
        },
        loss,
    })
}

#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub step: usize,
    pub wall_ms: f64,
    pub mean_return: f64,
    pub grad_norm: f64,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub policy: MlpPolicy,
    pub log: Vec<TrainLogRow>,
    pub stopped_early: bool,
    pub final_mean_return: f64,
    pub peak_tape_bytes: usize,
    pub updates: usize,
}

pub const TRAIN_LOG_HEADER: &str = "step,wall_ms,mean_return,grad_norm,loss";

/// One full training-step evaluation: sample the batch, roll out (chunked if
/// the working set exceeds the budget), and return loss, mean return and the
/// flat gradient.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_training_step(
    ensemble: &GpEnsemble,
    policy: &MlpPolicy,
    cfg: &TrainConfig,
    reward: &RewardParams,
    s0: &Array,
    goals: &Array,
    eps_key: u64,
    peak_bytes: &mut usize,
) -> Result<(f64, f64, Vec<f64>), TrainerError> {
    let b = cfg.batch_size;
    let chunk_rows = if cfg.chunk_size > 0 {
        cfg.chunk_size.min(b)
    } else {
        let row_bytes = rollout_row_bytes(cfg.horizon, ensemble.p(), ensemble.n()).max(1);
        (cfg.memory_budget_mb * 1024 * 1024 / row_bytes).clamp(1, b)
    };
    let store_rows = chunk_rows > 1 || cfg.chunk_size == 0;

    let mut grad_total = vec![0.0f64; policy.param_count()];
    let mut loss_total = 0.0f64;
    let mut return_total = 0.0f64;
    let mut start = 0usize;
    while start < b {
        let rows = chunk_rows.min(b - start);
        let s0_c = crate::array::slice("chunk", s0, 0, start, rows).map_err(DiffError::from)?;
        let g_c = crate::array::slice("chunk", goals, 0, start, rows).map_err(DiffError::from)?;
        let ids: Vec<u64> = (start..start + rows).map(|i| i as u64).collect();
        let mut tape = Tape::with_mode(cfg.mode);
        let vars = policy.tape_params(&mut tape);
        let out = rollout_batch(
            &mut tape,
            ensemble,
            policy,
            &vars,
            &s0_c,
            &g_c,
            cfg.horizon,
            eps_key,
            &ids,
            reward,
            cfg.variance,
            b,
            store_rows,
        )?;
        loss_total += tape.value(out.loss).scalar_value();
        return_total += out.batch.returns.iter().sum::<f64>();
        let grads = tape.backward(out.loss)?;
        let flat = policy.grads_flat(&grads, &vars);
        for (t, g) in grad_total.iter_mut().zip(flat.iter()) {
            *t += g;
        }
        *peak_bytes = (*peak_bytes).max(tape.peak_bytes());
        start += rows;
    }
    let mean_return = return_total / b as f64 / (cfg.horizon + 1) as f64;
    Ok((loss_total, mean_return, grad_total))
}

pub fn sample_batch(
    mode: SampleMode,
    fixed: &[f64],
    bounds: &[(f64, f64)],
    b: usize,
    norm: &Normalizer,
    rng: &mut StreamRng,
) -> Array {
    let p = fixed.len().max(bounds.len());
    let mut data = Vec::with_capacity(b * p);
    match mode {
        SampleMode::Fixed => {
            let row = norm.normalize_state(fixed);
            for _ in 0..b {
                data.extend_from_slice(&row);
            }
        }
        SampleMode::Uniform => {
            for _ in 0..b {
                let phys: Vec<f64> = bounds.iter().map(|&(lo, hi)| rng.uniform_in(lo, hi)).collect();
                data.extend_from_slice(&norm.normalize_state(&phys));
            }
        }
    }
    Array::matrix(b, p, data)
}

/// The full optimization loop. Writes one CSV row per step to `log_out`
/// (flushed every step) when given.
pub fn train_policy(
    ensemble: &GpEnsemble,
    policy: MlpPolicy,
    cfg: &TrainConfig,
    reward: &RewardParams,
    mut log_out: Option<&mut dyn Write>,
) -> Result<TrainResult, TrainerError> {
    let mut policy = policy;
    if policy.state_dim != ensemble.p() {
        return Err(TrainerError::Dim {
            what: format!(
                "policy expects {}-dim states, model has {}",
                policy.state_dim,
                ensemble.p()
            ),
        });
    }
    let root = StreamRng::new(cfg.seed, "train");
    let mut adam = AdamState::new(policy.param_count());
    let mut log = Vec::new();
    let mut history: Vec<f64> = Vec::new();
    let mut consecutive_bad = 0usize;
    let mut stopped_early = false;
    let mut peak_bytes = 0usize;
    let mut updates = 0usize;
    let started = Instant::now();

    if let Some(w) = log_out.as_deref_mut() {
        writeln!(w, "{TRAIN_LOG_HEADER}")?;
        w.flush()?;
    }

    for step in 0..cfg.max_steps {
        if cfg.max_wall_s > 0.0 && started.elapsed().as_secs_f64() >= cfg.max_wall_s {
            break;
        }
        let mut init_rng = root.substream(&[step as u64, 0]);
        let mut goal_rng = root.substream(&[step as u64, 1]);
        let s0 = sample_batch(
            cfg.init_state_mode,
            &cfg.fixed_init,
            &cfg.state_bounds,
            cfg.batch_size,
            &ensemble.normalizer,
            &mut init_rng,
        );
        let goals = sample_batch(
            cfg.goal_mode,
            &cfg.fixed_goal,
            &cfg.goal_bounds,
            cfg.batch_size,
            &ensemble.normalizer,
            &mut goal_rng,
        );
        let eps_key = root.substream(&[step as u64, 2]).key();

        let (loss, mean_return, grads) = evaluate_training_step(
            ensemble,
            &policy,
            cfg,
            reward,
            &s0,
            &goals,
            eps_key,
            &mut peak_bytes,
        )?;
        let grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();

        if grad_norm.is_finite() {
            consecutive_bad = 0;
            let mut flat = policy.params_flat();
            adam.update(&mut flat, &grads, cfg.learning_rate);
            policy.set_params_flat(&flat);
            updates += 1;
        } else {
            consecutive_bad += 1;
            if consecutive_bad >= 10 {
                if let Some(w) = log_out.as_deref_mut() {
                    w.flush()?;
                }
                return Err(TrainerError::TooManyNonFiniteGrads {
                    step,
                    count: consecutive_bad,
                });
            }
        }

        let row = TrainLogRow {
            step,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            mean_return,
            grad_norm,
            loss,
        };
        if let Some(w) = log_out.as_deref_mut() {
            writeln!(
                w,
                "{},{},{},{},{}",
                row.step, row.wall_ms, row.mean_return, row.grad_norm, row.loss
            )?;
            w.flush()?;
        }
        log.push(row);
        history.push(mean_return);

        if history.len() >= 2 * cfg.stop_window {
            let win = cfg.stop_window;
            let now: f64 = history[history.len() - win..].iter().sum::<f64>() / win as f64;
            let prev: f64 = history[history.len() - 2 * win..history.len() - win]
                .iter()
                .sum::<f64>()
                / win as f64;
            if (now - prev) / prev.abs().max(1e-12) < cfg.stop_rel_tol {
                stopped_early = true;
                break;
            }
        }
    }

    let final_mean_return = history.last().copied().unwrap_or(0.0);
    Ok(TrainResult {
        policy,
        log,
        stopped_early,
        final_mean_return,
        peak_tape_bytes: peak_bytes,
        updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_training_pairs, fit_normalizer};
    use crate::env::{collect_excitation_data, BoomParams, Excitation};
    use crate::gp::FitConfig;
    use crate::policy::InitScheme;

    fn seq() -> ExecMode {
        ExecMode::Sequential
    }

    #[test]
    fn reward_is_one_at_goal() {
        let rp = RewardParams::boom_default();
        for v in [[0.0, 0.0], [1.5, -2.0]] {
            assert_eq!(reward_row(&v, &v, &rp), 1.0);
        }
    }

    #[test]
    fn reward_paper_weights_value() {
        // Q = diag{10, 0.1}, sigma_r = 1, error (0.1, 0):
        // exp(-0.5 * 10 * 0.01) = exp(-0.05)
        let rp = RewardParams::boom_default();
        let r = reward_row(&[0.1, 0.5], &[0.0, 0.5], &rp);
        assert!((r - (-0.05f64).exp()).abs() < 1e-12);
        assert!((r - 0.951229).abs() < 1e-6);
    }

    #[test]
    fn reward_decreases_along_rays() {
        let rp = RewardParams::boom_default();
        let g = [0.3, -0.1];
        let dir = [0.7, 0.4];
        let mut prev = f64::INFINITY;
        for k in 1..20 {
            let t = k as f64 * 0.1;
            let s = [g[0] + t * dir[0], g[1] + t * dir[1]];
            let r = reward_row(&s, &g, &rp);
            assert!(r < prev);
            assert!(r > 0.0 && r <= 1.0);
            prev = r;
        }
    }

    fn ensemble_from(params: &BoomParams, n_points: usize, seed: u64, fit_steps: usize) -> GpEnsemble {
        let duration = (n_points as f64) * params.dt;
        let log = collect_excitation_data(params, duration, Excitation::RandomWalk, seed);
        let ds = log.to_dataset(params.dt);
        let norm = fit_normalizer(&ds);
        let pairs = build_training_pairs(&ds, &norm);
        let cfg = FitConfig {
            max_steps: fit_steps,
            subset: 0,
            mode: seq(),
            ..FitConfig::default()
        };
        let (ens, _) = GpEnsemble::fit(&pairs, norm, params.dt, &cfg, pairs.len()).unwrap();
        ens
    }

    /// Small fitted ensemble on boom data for rollout tests.
    fn small_ensemble(n_points: usize, seed: u64) -> GpEnsemble {
        ensemble_from(&BoomParams::default(), n_points, seed, 60)
    }

    fn norm_fixed(ens: &GpEnsemble, phys: &[f64], b: usize) -> Array {
        let row = ens.normalizer.normalize_state(phys);
        let mut data = Vec::new();
        for _ in 0..b {
            data.extend_from_slice(&row);
        }
        Array::matrix(b, row.len(), data)
    }

    #[test]
    fn zero_horizon_loss_is_initial_reward() {
        let ens = small_ensemble(50, 1);
        let policy = MlpPolicy::init(2, 0, &[4], 1, 2, InitScheme::He).unwrap();
        let rp = RewardParams::boom_default();
        let s0 = norm_fixed(&ens, &[-0.5, 0.0], 3);
        let goals = norm_fixed(&ens, &[0.0, 0.0], 3);
        let mut tape = Tape::with_mode(seq());
        let vars = policy.tape_params(&mut tape);
        let out = rollout_batch(
            &mut tape, &ens, &policy, &vars, &s0, &goals, 0, 7, &[0, 1, 2], &rp,
            VarianceKind::Exact, 3, false,
        )
        .unwrap();
        let expect: f64 = (0..3)
            .map(|i| reward_row(s0.row(i), goals.row(i), &rp))
            .sum::<f64>()
            / 3.0;
        assert!((tape.value(out.loss).scalar_value() + expect).abs() < 1e-12);
        assert_eq!(out.batch.states.len(), 1);
        assert_eq!(out.batch.actions.len(), 0);
    }

    #[test]
    fn batched_rollout_rows_match_single_rollouts() {
        let ens = small_ensemble(60, 3);
        let policy = MlpPolicy::init(2, 2, &[4], 1, 4, InitScheme::He).unwrap();
        let rp = RewardParams::boom_default();
        let b = 16;
        let horizon = 12;
        let s0 = norm_fixed(&ens, &[-0.5, 0.1], b);
        let goals = norm_fixed(&ens, &[0.2, 0.0], b);
        let eps_key = 99u64;

        let mut tape = Tape::with_mode(seq());
        let vars = policy.tape_params(&mut tape);
        let ids: Vec<u64> = (0..b as u64).collect();
        let full = rollout_batch(
            &mut tape, &ens, &policy, &vars, &s0, &goals, horizon, eps_key, &ids, &rp,
            VarianceKind::Root, b, false,
        )
        .unwrap();

        for i in [0usize, 5, 15] {
            let s0_i = Array::matrix(1, 2, s0.row(i).to_vec());
            let g_i = Array::matrix(1, 2, goals.row(i).to_vec());
            let mut t1 = Tape::with_mode(seq());
            let v1 = policy.tape_params(&mut t1);
            let single = rollout_batch(
                &mut t1, &ens, &policy, &v1, &s0_i, &g_i, horizon, eps_key, &[i as u64], &rp,
                VarianceKind::Root, 1, false,
            )
            .unwrap();
            let diff = (single.batch.returns[0] - full.batch.returns[i]).abs();
            assert!(diff < 1e-10, "row {i}: diff {diff}");
            for k in 0..=horizon {
                for c in 0..2 {
                    let d =
                        (single.batch.states[k].get2(0, c) - full.batch.states[k].get2(i, c)).abs();
                    assert!(d < 1e-10, "row {i} step {k} col {c}: {d}");
                }
            }
        }
    }

    #[test]
    fn rewards_bounded_and_returns_in_range() {
        let ens = small_ensemble(50, 5);
        let policy = MlpPolicy::init(2, 0, &[4], 1, 6, InitScheme::StandardNormal).unwrap();
        let rp = RewardParams::boom_default();
        let b = 8;
        let horizon = 20;
        let s0 = norm_fixed(&ens, &[-0.4, 0.0], b);
        let goals = norm_fixed(&ens, &[0.3, 0.0], b);
        let mut tape = Tape::with_mode(seq());
        let vars = policy.tape_params(&mut tape);
        let ids: Vec<u64> = (0..b as u64).collect();
        let out = rollout_batch(
            &mut tape, &ens, &policy, &vars, &s0, &goals, horizon, 3, &ids, &rp,
            VarianceKind::Root, b, false,
        )
        .unwrap();
        for step_rewards in &out.batch.rewards {
            for &r in step_rewards {
                assert!(r > 0.0 && r <= 1.0);
            }
        }
        for &g in &out.batch.returns {
            assert!(g > 0.0 && g <= (horizon + 1) as f64);
        }
    }

    #[test]
    fn mean_return_invariant_under_row_permutation() {
        let ens = small_ensemble(50, 7);
        let policy = MlpPolicy::init(2, 0, &[4], 1, 8, InitScheme::He).unwrap();
        let rp = RewardParams::boom_default();
        let b = 6;
        // distinct initial rows
        let mut s0_rows = Vec::new();
        for i in 0..b {
            s0_rows.push(vec![-0.6 + 0.15 * i as f64, 0.05 * i as f64]);
        }
        let make = |order: &[usize]| {
            let mut data = Vec::new();
            for &i in order {
                data.extend_from_slice(&ens.normalizer.normalize_state(&s0_rows[i]));
            }
            Array::matrix(b, 2, data)
        };
        let goals = norm_fixed(&ens, &[0.0, 0.0], b);
        let fwd: Vec<usize> = (0..b).collect();
        let rev: Vec<usize> = (0..b).rev().collect();
        let run = |order: &[usize]| {
            let ids: Vec<u64> = order.iter().map(|&i| i as u64).collect();
            let mut tape = Tape::with_mode(seq());
            let vars = policy.tape_params(&mut tape);
            let out = rollout_batch(
                &mut tape, &ens, &policy, &vars, &make(order), &goals, 15, 11, &ids, &rp,
                VarianceKind::Root, b, false,
            )
            .unwrap();
            out.batch.mean_return_per_step
        };
        let a = run(&fwd);
        let z = run(&rev);
        assert!((a - z).abs() < 1e-10, "{a} vs {z}");
    }

    #[test]
    fn sampled_batch_mean_matches_mean_propagation() {
        // With eps = 0 the rollout follows the posterior mean; a large
        // sampled batch agrees within Monte Carlo error provided the model
        // is accurate enough that trajectories stay concentrated. A smooth
        // noise-free plant (no deadband kink, no slew lag) is learnable to
        // near-zero posterior variance.
        let quiet = BoomParams {
            noise_std: (0.0, 0.0),
            deadband: 0.0,
            rate_limit: 1e6,
            ..BoomParams::default()
        };
        let ens = ensemble_from(&quiet, 400, 9, 500);
        let mut policy = MlpPolicy::init(2, 0, &[4], 1, 10, InitScheme::He).unwrap();
        policy.set_params_flat(&vec![0.0; policy.param_count()]);
        let rp = RewardParams::boom_default();
        let horizon = 10;

        // Start in the densest data region: the per-column mean state.
        let start = vec![ens.normalizer.mean[0], ens.normalizer.mean[1]];
        // Deterministic reference: propagate the posterior mean (eps = 0).
        let s0_one = norm_fixed(&ens, &start, 1);
        let goals_one = norm_fixed(&ens, &start, 1);
        let mut s = s0_one.clone();
        let mut g_mean = reward_row(s.row(0), goals_one.row(0), &rp);
        for _ in 0..horizon {
            let a = policy.act_row(s.row(0), &[]).unwrap();
            let a_norm = ens.normalizer.normalize_action(&a);
            let mut xs = s.row(0).to_vec();
            xs.extend_from_slice(&a_norm);
            let xs = Array::matrix(1, 3, xs);
            let mut next = s.row(0).to_vec();
            for m in 0..2 {
                let (mean, _) = crate::gp::predict(
                    &ens.outputs[m].model,
                    &ens.outputs[m].cache,
                    &xs,
                    VarianceKind::Exact,
                    seq(),
                )
                .unwrap();
                next[m] += mean[0] * ens.delta_scale_normalized(m);
            }
            s = Array::matrix(1, 2, next);
            g_mean += reward_row(s.row(0), goals_one.row(0), &rp);
        }
        let mean_prop = g_mean / (horizon + 1) as f64;

        let b = 1000;
        let s0 = norm_fixed(&ens, &start, b);
        let goals = norm_fixed(&ens, &start, b);
        let ids: Vec<u64> = (0..b as u64).collect();
        let mut tape = Tape::with_mode(seq());
        let vars = policy.tape_params(&mut tape);
        let out = rollout_batch(
            &mut tape, &ens, &policy, &vars, &s0, &goals, horizon, 13, &ids, &rp,
            VarianceKind::Exact, b, false,
        )
        .unwrap();
        let rel = (out.batch.mean_return_per_step - mean_prop).abs() / mean_prop;
        assert!(
            rel < 0.05,
            "sampled {} vs mean-propagated {mean_prop}: rel {rel}",
            out.batch.mean_return_per_step
        );
    }

    #[test]
    fn chunked_gradients_match_unchunked() {
        let ens = small_ensemble(50, 11);
        let policy = MlpPolicy::init(2, 0, &[4], 1, 12, InitScheme::He).unwrap();
        let rp = RewardParams::boom_default();
        let mut cfg = TrainConfig {
            batch_size: 10,
            horizon: 8,
            chunk_size: 10,
            variance: VarianceKind::Root,
            mode: seq(),
            ..TrainConfig::default()
        };
        let s0 = norm_fixed(&ens, &[-0.5, 0.0], 10);
        let goals = norm_fixed(&ens, &[0.2, 0.0], 10);
        let mut peak = 0;
        let (loss_a, ret_a, grad_a) =
            evaluate_training_step(&ens, &policy, &cfg, &rp, &s0, &goals, 21, &mut peak).unwrap();
        cfg.chunk_size = 3;
        let (loss_b, ret_b, grad_b) =
            evaluate_training_step(&ens, &policy, &cfg, &rp, &s0, &goals, 21, &mut peak).unwrap();
        assert!((loss_a - loss_b).abs() < 1e-10);
        assert!((ret_a - ret_b).abs() < 1e-10);
        for (a, b) in grad_a.iter().zip(grad_b.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn rollout_gradient_matches_finite_differences() {
        let ens = small_ensemble(40, 13);
        let policy = MlpPolicy::init(2, 0, &[3], 1, 14, InitScheme::He).unwrap();
        let rp = RewardParams::boom_default();
        let b = 3;
        let horizon = 6;
        let s0 = norm_fixed(&ens, &[-0.4, 0.0], b);
        let goals = norm_fixed(&ens, &[0.1, 0.0], b);
        let eps_key = 31u64;
        let ids: Vec<u64> = (0..b as u64).collect();

        let weights = policy.weights.clone();
        let biases = policy.biases.clone();
        let params: Vec<Array> = weights
            .iter()
            .cloned()
            .chain(biases.iter().cloned())
            .collect();
        let nw = weights.len();
        let shell = policy.clone();
        let err = crate::tape::grad_check(
            &mut |tape, vars| {
                // reorder params into (w, b) interleaved order
                let mut pv = Vec::new();
                for li in 0..nw {
                    pv.push(vars[li]);
                    pv.push(vars[nw + li]);
                }
                let out = rollout_batch(
                    tape, &ens, &shell, &pv, &s0, &goals, horizon, eps_key, &ids, &rp,
                    VarianceKind::Root, b, false,
                )
                .map_err(|e| match e {
                    TrainerError::Diff(d) => d,
                    other => panic!("unexpected rollout error: {other}"),
                })?;
                Ok(out.loss)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn max_steps_zero_returns_initial_policy() {
        let ens = small_ensemble(40, 15);
        let policy = MlpPolicy::init(2, 0, &[4], 1, 16, InitScheme::He).unwrap();
        let before = policy.params_flat();
        let cfg = TrainConfig {
            max_steps: 0,
            batch_size: 4,
            horizon: 5,
            mode: seq(),
            ..TrainConfig::default()
        };
        let res = train_policy(&ens, policy, &cfg, &RewardParams::boom_default(), None).unwrap();
        assert_eq!(res.policy.params_flat(), before);
        assert!(res.log.is_empty());
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let ens = small_ensemble(40, 17);
        let make_policy = || MlpPolicy::init(2, 0, &[4], 1, 18, InitScheme::He).unwrap();
        let cfg = TrainConfig {
            max_steps: 5,
            batch_size: 6,
            horizon: 8,
            seed: 123,
            variance: VarianceKind::Root,
            mode: seq(),
            ..TrainConfig::default()
        };
        let rp = RewardParams::boom_default();
        let a = train_policy(&ens, make_policy(), &cfg, &rp, None).unwrap();
        let b = train_policy(&ens, make_policy(), &cfg, &rp, None).unwrap();
        assert_eq!(a.policy.params_flat(), b.policy.params_flat());
        assert_eq!(a.log.len(), b.log.len());
        for (ra, rb) in a.log.iter().zip(b.log.iter()) {
            assert_eq!(ra.mean_return, rb.mean_return);
            assert_eq!(ra.grad_norm, rb.grad_norm);
            assert_eq!(ra.loss, rb.loss);
        }
    }

    #[test]
    fn policy_model_dimension_mismatch_is_reported() {
        let ens = small_ensemble(40, 19);
        let policy = MlpPolicy::init(3, 0, &[4], 1, 20, InitScheme::He).unwrap();
        let cfg = TrainConfig {
            max_steps: 1,
            batch_size: 2,
            horizon: 2,
            mode: seq(),
            ..TrainConfig::default()
        };
        match train_policy(&ens, policy, &cfg, &RewardParams::boom_default(), None) {
            Err(TrainerError::Dim { what }) => {
                assert!(what.contains('3') && what.contains('2'), "{what}");
            }
            other => panic!("expected Dim error, got {other:?}"),
        }
    }
}
