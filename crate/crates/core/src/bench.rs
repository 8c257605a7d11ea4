//! Scalability and learning-speed benchmarks.
//!
//! Two instruments: a scaling sweep timing full optimization iterations
//! (forward + backward + update) along one axis (batch size, horizon or
//! policy width), and a learning comparison racing batch-of-100 training
//! against one-trajectory-per-pass training under an equal wall-clock
//! budget.
//!
//! "Memory" is the accounted Array bytes on the tape at peak, not OS RSS:
//! portable and deterministic. A config point whose unchunked working set
//! exceeds the budget is recorded as failed and skipped, the way an
//! implementation without chunking would fall over.

use std::time::Instant;

use crate::exec::ExecMode;
use crate::gp::GpEnsemble;
use crate::policy::{InitScheme, MlpPolicy};
use crate::rng::StreamRng;
use crate::trainer::{
    self, evaluate_training_step, AdamState, RewardParams, TrainConfig, TrainerError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    BatchSize,
    Horizon,
    PolicyLayers,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "batch_size" => Some(SweepAxis::BatchSize),
            "horizon" => Some(SweepAxis::Horizon),
            "policy_layers" => Some(SweepAxis::PolicyLayers),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::Horizon => "horizon",
            SweepAxis::PolicyLayers => "policy_layers",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub axis: SweepAxis,
    /// Strictly increasing axis values. For `policy_layers` a value w means
    /// two hidden layers of w nodes.
    pub values: Vec<usize>,
    pub repetitions: usize,
    pub warmup: usize,
    /// Fixed counterparts while one axis sweeps.
    pub batch_size: usize,
    pub horizon: usize,
    pub hidden: Vec<usize>,
    /// Budget for the unchunked working set; larger points are recorded as
    /// failures.
    pub memory_budget_mb: usize,
    /// Run rollout chunks through the parallel execution path.
    pub parallel: bool,
    pub seed: u64,
    pub variance: crate::gp::VarianceKind,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            axis: SweepAxis::Horizon,
            values: vec![100, 300, 1000],
            repetitions: 3,
            warmup: 2,
            batch_size: 16,
            horizon: 100,
            hidden: vec![8, 8],
            memory_budget_mb: 1536,
            parallel: false,
            seed: 0,
            variance: crate::gp::VarianceKind::Root,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.repetitions < 3 {
            return Err(format!("repetitions must be >= 3, got {}", self.repetitions));
        }
        if !self.values.windows(2).all(|w| w[0] < w[1]) {
            return Err(format!("axis values must be strictly increasing: {:?}", self.values));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub axis: &'static str,
    pub value: usize,
    pub repetitions: usize,
    pub iter_ms_mean: f64,
    pub iter_ms_min: f64,
    pub iter_ms_max: f64,
    pub peak_mb: f64,
    pub parallel: bool,
    /// Estimated working set exceeded the budget; timings are absent.
    pub failed: bool,
}

pub const SWEEP_CSV_HEADER: &str = "axis,value,rep,iter_ms_mean,iter_ms_min,iter_ms_max,peak_mb";

/// Unchunked working-set estimate for one optimization iteration, bytes.
pub fn working_set_bytes(batch: usize, horizon: usize, outputs: usize, n_train: usize) -> usize {
    batch * trainer::rollout_row_bytes(horizon, outputs, n_train)
}

/// Time full optimization iterations along the sweep axis. Timings exclude
/// the one-time cache construction (the ensemble arrives fitted and cached).
pub fn run_scaling_sweep(
    ensemble: &GpEnsemble,
    cfg: &BenchConfig,
) -> Result<Vec<BenchRecord>, TrainerError> {
    cfg.validate().map_err(|what| TrainerError::Dim { what })?;
    let reward = RewardParams::boom_default();
    let mut records = Vec::with_capacity(cfg.values.len());
    for (vi, &value) in cfg.values.iter().enumerate() {
        let (b, h, hidden) = match cfg.axis {
            SweepAxis::BatchSize => (value, cfg.horizon, cfg.hidden.clone()),
            SweepAxis::Horizon => (cfg.batch_size, value, cfg.hidden.clone()),
            SweepAxis::PolicyLayers => (cfg.batch_size, cfg.horizon, vec![value, value]),
        };
        let estimated = working_set_bytes(b, h, ensemble.p(), ensemble.n());
        if estimated > cfg.memory_budget_mb * 1024 * 1024 {
            records.push(BenchRecord {
                axis: cfg.axis.label(),
                value,
                repetitions: cfg.repetitions,
                iter_ms_mean: f64::NAN,
                iter_ms_min: f64::NAN,
                iter_ms_max: f64::NAN,
                peak_mb: estimated as f64 / (1024.0 * 1024.0),
                parallel: cfg.parallel,
                failed: true,
            });
            continue;
        }

        let mode = if cfg.parallel {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        };
        let tcfg = TrainConfig {
            batch_size: b,
            horizon: h,
            seed: cfg.seed,
            variance: cfg.variance,
            mode,
            // One chunk: the point of the sweep is the batch working set.
            chunk_size: b,
            ..TrainConfig::default()
        };
        let mut policy = MlpPolicy::init(
            ensemble.p(),
            0,
            &hidden,
            ensemble.q(),
            cfg.seed ^ (vi as u64),
            InitScheme::He,
        )?;
        let mut adam = AdamState::new(policy.param_count());
        let root = StreamRng::new(cfg.seed, "bench-sweep");
        let norm = &ensemble.normalizer;
        // States only shape the timing workload; start at the data mean.
        let mean_state = vec![norm.mean[0], norm.mean[1]];
        let s0 = trainer::sample_batch(
            trainer::SampleMode::Fixed,
            &mean_state,
            &[],
            b,
            norm,
            &mut root.substream(&[0]),
        );
        let goals = trainer::sample_batch(
            trainer::SampleMode::Fixed,
            &mean_state,
            &[],
            b,
            norm,
            &mut root.substream(&[1]),
        );

        let mut peak = 0usize;
        let mut times_ms = Vec::with_capacity(cfg.repetitions);
        for it in 0..cfg.warmup + cfg.repetitions {
            let t0 = Instant::now();
            let (_, _, grads) = evaluate_training_step(
                ensemble,
                &policy,
                &tcfg,
                &reward,
                &s0,
                &goals,
                cfg.seed ^ (it as u64).wrapping_mul(0x9E37),
                &mut peak,
            )?;
            let mut flat = policy.params_flat();
            adam.update(&mut flat, &grads, tcfg.learning_rate);
            policy.set_params_flat(&flat);
            let elapsed = t0.elapsed().as_secs_f64() * 1e3;
            if it >= cfg.warmup {
                times_ms.push(elapsed);
            }
        }
        let mean = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
        let min = times_ms.iter().copied().fold(f64::INFINITY, f64::min);
        let max = times_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        records.push(BenchRecord {
            axis: cfg.axis.label(),
            value,
            repetitions: cfg.repetitions,
            iter_ms_mean: mean,
            iter_ms_min: min,
            iter_ms_max: max,
            peak_mb: peak as f64 / (1024.0 * 1024.0),
            parallel: cfg.parallel,
            failed: false,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct ComparisonConfig {
    pub trials: usize,
    pub wall_budget_s: f64,
    pub batch_size: usize,
    pub horizon: usize,
    pub seed: u64,
    pub variance: crate::gp::VarianceKind,
    pub hidden: Vec<usize>,
    pub fixed_init: Vec<f64>,
    pub fixed_goal: Vec<f64>,
    pub learning_rate: f64,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        ComparisonConfig {
            trials: 8,
            wall_budget_s: 10.0,
            batch_size: 100,
            horizon: 50,
            seed: 0,
            variance: crate::gp::VarianceKind::Root,
            hidden: vec![8, 8],
            fixed_init: vec![-0.9, 0.0],
            fixed_goal: vec![0.0, 0.0],
            learning_rate: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub mode: &'static str,
    pub trial: usize,
    pub wall_s: f64,
    /// Best-so-far batch mean return per step.
    pub mean_return: f64,
}

pub const CURVE_CSV_HEADER: &str = "mode,trial,wall_s,mean_return";

#[derive(Debug, Clone)]
pub struct ModeSummary {
    pub mode: &'static str,
    /// Final best-so-far return per trial.
    pub finals: Vec<f64>,
    pub mean_final: f64,
    /// 95% bootstrap interval over trial finals.
    pub ci_low: f64,
    pub ci_high: f64,
    pub updates_per_second: f64,
}

#[derive(Debug)]
pub struct ComparisonResult {
    pub points: Vec<CurvePoint>,
    pub batch: ModeSummary,
    pub sequential: ModeSummary,
}

fn bootstrap_ci(values: &[f64], seed: u64) -> (f64, f64) {
    let mut rng = StreamRng::new(seed, "bootstrap");
    let n = values.len();
    let mut means: Vec<f64> = (0..1000)
        .map(|_| {
            let mut s = 0.0;
            for _ in 0..n {
                s += values[(rng.next_u64() % n as u64) as usize];
            }
            s / n as f64
        })
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (means[25], means[974])
}

/// Race batch-of-b against one-trajectory-per-pass training under the same
/// wall budget, with shared GP models and per-trial shared policy inits.
pub fn run_learning_comparison(
    ensemble: &GpEnsemble,
    cfg: &ComparisonConfig,
) -> Result<ComparisonResult, TrainerError> {
    assert!(cfg.trials >= 8, "need at least 8 trials per mode");
    let reward = RewardParams::boom_default();
    let mut points = Vec::new();
    let mut summaries = Vec::new();
    for (mode_name, b) in [("batch_100", cfg.batch_size), ("sequential_1", 1)] {
        let mut finals = Vec::with_capacity(cfg.trials);
        let mut total_updates = 0usize;
        let mut total_wall = 0.0f64;
        for trial in 0..cfg.trials {
            let policy = MlpPolicy::init(
                ensemble.p(),
                0,
                &cfg.hidden,
                ensemble.q(),
                cfg.seed.wrapping_add(1000 + trial as u64),
                InitScheme::He,
            )?;
            let tcfg = TrainConfig {
                batch_size: b,
                horizon: cfg.horizon,
                learning_rate: cfg.learning_rate,
                max_steps: usize::MAX / 2,
                seed: cfg.seed.wrapping_add(2000 + trial as u64),
                fixed_init: cfg.fixed_init.clone(),
                fixed_goal: cfg.fixed_goal.clone(),
                variance: cfg.variance,
                mode: ExecMode::Sequential,
                stop_rel_tol: f64::NEG_INFINITY,
                max_wall_s: cfg.wall_budget_s,
                ..TrainConfig::default()
            };
            let result = trainer::train_policy(ensemble, policy, &tcfg, &reward, None)?;
            let mut best = f64::NEG_INFINITY;
            // Thin long sequential logs so curve files stay modest.
            let stride = (result.log.len() / 200).max(1);
            for (i, row) in result.log.iter().enumerate() {
                best = best.max(row.mean_return);
                if i % stride == 0 || i + 1 == result.log.len() {
                    points.push(CurvePoint {
                        mode: mode_name,
                        trial,
                        wall_s: row.wall_ms / 1e3,
                        mean_return: best,
                    });
                }
            }
            finals.push(if best.is_finite() { best } else { 0.0 });
            total_updates += result.updates;
            total_wall += result
                .log
                .last()
                .map(|r| r.wall_ms / 1e3)
                .unwrap_or(cfg.wall_budget_s);
        }
        let mean_final = finals.iter().sum::<f64>() / finals.len() as f64;
        let (ci_low, ci_high) = bootstrap_ci(&finals, cfg.seed);
        summaries.push(ModeSummary {
            mode: mode_name,
            finals,
            mean_final,
            ci_low,
            ci_high,
            updates_per_second: total_updates as f64 / total_wall.max(1e-9),
        });
    }
    let sequential = summaries.pop().unwrap();
    let batch = summaries.pop().unwrap();
    Ok(ComparisonResult {
        points,
        batch,
        sequential,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_training_pairs, fit_normalizer};
    use crate::env::{collect_excitation_data, BoomParams, Excitation};
    use crate::gp::FitConfig;

    fn tiny_ensemble() -> GpEnsemble {
        let params = BoomParams::default();
        let log = collect_excitation_data(&params, 3.0, Excitation::RandomWalk, 5);
        let ds = log.to_dataset(params.dt);
        let norm = fit_normalizer(&ds);
        let pairs = build_training_pairs(&ds, &norm);
        let cfg = FitConfig {
            max_steps: 20,
            subset: 0,
            mode: ExecMode::Sequential,
            ..FitConfig::default()
        };
        let (ens, _) = GpEnsemble::fit(&pairs, norm, params.dt, &cfg, pairs.len()).unwrap();
        ens
    }

    #[test]
    fn sweep_produces_ordered_records() {
        let ens = tiny_ensemble();
        let cfg = BenchConfig {
            axis: SweepAxis::BatchSize,
            values: vec![1, 4, 8],
            repetitions: 3,
            warmup: 1,
            horizon: 5,
            batch_size: 4,
            ..BenchConfig::default()
        };
        let records = run_scaling_sweep(&ens, &cfg).unwrap();
        assert_eq!(records.len(), 3);
        for (r, &v) in records.iter().zip(cfg.values.iter()) {
            assert_eq!(r.value, v);
            assert!(!r.failed);
            assert!(r.iter_ms_min <= r.iter_ms_mean && r.iter_ms_mean <= r.iter_ms_max);
            assert!(r.peak_mb > 0.0);
        }
    }

    #[test]
    fn over_budget_points_are_recorded_as_failures() {
        let ens = tiny_ensemble();
        let cfg = BenchConfig {
            axis: SweepAxis::BatchSize,
            values: vec![2, 8192],
            repetitions: 3,
            warmup: 0,
            horizon: 5,
            memory_budget_mb: 1,
            ..BenchConfig::default()
        };
        let records = run_scaling_sweep(&ens, &cfg).unwrap();
        assert_eq!(records.len(), 2);
        assert!(records[1].failed);
        assert!(records[1].iter_ms_mean.is_nan());
        assert!(records[1].peak_mb > 1.0);
    }

    #[test]
    fn sweep_validation() {
        let cfg = BenchConfig {
            values: vec![4, 4],
            ..BenchConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = BenchConfig {
            repetitions: 2,
            ..BenchConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn comparison_shapes_and_monotone_curves() {
        let ens = tiny_ensemble();
        let cfg = ComparisonConfig {
            trials: 8,
            wall_budget_s: 0.3,
            batch_size: 8,
            horizon: 5,
            ..ComparisonConfig::default()
        };
        let result = run_learning_comparison(&ens, &cfg).unwrap();
        assert_eq!(result.batch.finals.len(), 8);
        assert_eq!(result.sequential.finals.len(), 8);
        assert!(result.sequential.updates_per_second > result.batch.updates_per_second);
        // best-so-far curves are monotone per (mode, trial)
        let mut last: std::collections::HashMap<(&str, usize), f64> = Default::default();
        for p in &result.points {
            let e = last.entry((p.mode, p.trial)).or_insert(f64::NEG_INFINITY);
            assert!(p.mean_return >= *e);
            *e = p.mean_return;
        }
        assert!(result.batch.ci_low <= result.batch.mean_final);
        assert!(result.batch.ci_high >= result.batch.mean_final);
    }
}
