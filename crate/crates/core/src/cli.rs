//! Command implementations behind the binary: collect, fit-gp, train, eval,
//! bench. Each takes a parsed `RunConfig` plus file paths and returns a
//! summary the binary prints. Exit codes: 0 success, 1 usage/config error,
//! 2 numerical failure, 3 I/O error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::array::Array;
use crate::bench::{self, ComparisonResult};
use crate::config::{ConfigError, RunConfig};
use crate::container::ContainerError;
use crate::data::{self, DataError, TransitionDataset};
use crate::env::{self, PlantState};
use crate::gp::{self, FitReport, GpEnsemble, GpError};
use crate::policy::{MlpPolicy, PolicyError};
use crate::rng::StreamRng;
use crate::trainer::{self, RewardParams, TrainerError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<GpError> for CliError {
    fn from(e: GpError) -> Self {
        match e {
            GpError::Dim { .. } | GpError::NotFitted => CliError::Usage(e.to_string()),
            GpError::Container(c) => ContainerError::into(c),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Container(c) => ContainerError::into(c),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::Dim { .. } => CliError::Usage(e.to_string()),
            TrainerError::Policy(p) => PolicyError::into(p),
            TrainerError::Gp(g) => GpError::into(g),
            TrainerError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

fn io_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Io(e.to_string())
}

/// Conventional file names inside the output directory.
pub struct OutPaths {
    pub dir: PathBuf,
}

impl OutPaths {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(io_err)?;
        Ok(OutPaths {
            dir: dir.to_path_buf(),
        })
    }

    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.csv")
    }
    pub fn model(&self) -> PathBuf {
        self.dir.join("model.gpm")
    }
    pub fn policy(&self) -> PathBuf {
        self.dir.join("policy.gpp")
    }
    pub fn train_log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
    pub fn eval_metrics(&self) -> PathBuf {
        self.dir.join("eval_metrics.csv")
    }
    pub fn eval_traj(&self) -> PathBuf {
        self.dir.join("eval_traj.csv")
    }
    pub fn bench_sweep(&self) -> PathBuf {
        self.dir.join("bench_sweep.csv")
    }
    pub fn learning_curves(&self) -> PathBuf {
        self.dir.join("learning_curves.csv")
    }
}

#[derive(Debug)]
pub struct CollectSummary {
    pub rows: usize,
    pub transitions: usize,
    pub coverage: f64,
    pub path: PathBuf,
}

pub fn cmd_collect(
    cfg: &RunConfig,
    out: &OutPaths,
    duration_override: Option<f64>,
) -> Result<CollectSummary, CliError> {
    let duration = duration_override.unwrap_or(cfg.collect_duration);
    if duration < 10.0 * cfg.plant.dt {
        return Err(CliError::Usage(format!(
            "collect duration {duration} s is below 10 dt = {} s",
            10.0 * cfg.plant.dt
        )));
    }
    let log = env::collect_excitation_data(&cfg.plant, duration, cfg.collect_excitation, cfg.seed);
    let path = out.dataset();
    data::write_csv(&path, &log.times, &log.states, &log.actions)?;
    Ok(CollectSummary {
        rows: log.times.len(),
        transitions: log.times.len() - 1,
        coverage: log.angle_coverage(&cfg.plant),
        path,
    })
}

#[derive(Debug)]
pub struct FitSummary {
    pub reports: Vec<FitReport>,
    pub holdout_rmse: Vec<f64>,
    pub rmse_limits: Vec<f64>,
    pub cache_seconds: f64,
    pub n: usize,
    pub path: PathBuf,
}

/// Deterministic stride split: every k-th transition is held out.
fn holdout_indices(n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    if fraction <= 0.0 {
        return ((0..n).collect(), Vec::new());
    }
    let k = (1.0 / fraction).round().max(2.0) as usize;
    let mut train = Vec::with_capacity(n);
    let mut held = Vec::with_capacity(n / k + 1);
    for i in 0..n {
        if i % k == k - 1 {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    (train, held)
}

fn gather_rows(a: &Array, idx: &[usize]) -> Array {
    let c = a.ncols();
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(a.row(i));
    }
    Array::matrix(idx.len(), c, out)
}

pub fn cmd_fit_gp(
    cfg: &RunConfig,
    data_path: &Path,
    out: &OutPaths,
) -> Result<FitSummary, CliError> {
    let dataset = data::load_csv(data_path)?;
    fit_gp_from_dataset(cfg, &dataset, out)
}

/// The fit pipeline: normalizer on the full data, hyperparameters fitted on
/// the 80% split, adequacy gate on the held-out 20%, final cache on all
/// points.
pub fn fit_gp_from_dataset(
    cfg: &RunConfig,
    dataset: &TransitionDataset,
    out: &OutPaths,
) -> Result<FitSummary, CliError> {
    let norm = data::fit_normalizer(dataset);
    let pairs = data::build_training_pairs(dataset, &norm);
    let n = pairs.len();
    let p = pairs.p;
    let (train_idx, held_idx) = holdout_indices(n, cfg.fit_holdout_fraction);
    let x_full = Arc::new(pairs.inputs.clone());
    let x_train = gather_rows(&pairs.inputs, &train_idx);

    let mut reports = Vec::with_capacity(p);
    let mut holdout_rmse = Vec::with_capacity(p);
    let mut rmse_limits = Vec::with_capacity(p);
    let mut outputs = Vec::with_capacity(p);
    let mut cache_seconds = 0.0f64;

    for m in 0..p {
        let y_full = pairs.target_column(m);
        let y_train: Vec<f64> = train_idx.iter().map(|&i| y_full[i]).collect();
        let (hp, report) = gp::fit_output(&x_train, &y_train, m, &cfg.fit)?;

        // Held-out one-step RMSE in raw state units, predicted from the
        // training-split cache.
        if !held_idx.is_empty() {
            let split_cache = gp::build_cache(&x_train, &y_train, &hp, 0, cfg.fit.mode)?;
            let mut split_model =
                gp::GpModel::new(Arc::new(x_train.clone()), y_train.clone(), hp.clone());
            split_model.fitted = true;
            let x_held = gather_rows(&pairs.inputs, &held_idx);
            let (means, _) = gp::predict(
                &split_model,
                &split_cache,
                &x_held,
                gp::VarianceKind::Exact,
                cfg.fit.mode,
            )?;
            let mut se = 0.0f64;
            for (j, &i) in held_idx.iter().enumerate() {
                let predicted =
                    dataset.states.get2(i, m) + means[j] * pairs.target_stds[m];
                let err = predicted - dataset.next_states.get2(i, m);
                se += err * err;
            }
            holdout_rmse.push((se / held_idx.len() as f64).sqrt());
        } else {
            holdout_rmse.push(f64::NAN);
        }
        let noise_floor = if m == 0 {
            cfg.plant.noise_std.0
        } else {
            cfg.plant.noise_std.1
        };
        rmse_limits.push(3.0 * noise_floor.max(1e-6));

        let t0 = Instant::now();
        let cache = gp::build_cache(&x_full, &y_full, &hp, cfg.fit_root_rank, cfg.fit.mode)?;
        cache_seconds += t0.elapsed().as_secs_f64();
        let mut model = gp::GpModel::new(Arc::clone(&x_full), y_full, hp);
        model.fitted = true;
        outputs.push(gp::GpOutput {
            model,
            cache,
            target_std: pairs.target_stds[m],
        });
        reports.push(report);
    }

    // Model-adequacy gate before any policy training happens downstream.
    for m in 0..p {
        if !held_idx.is_empty() && holdout_rmse[m] >= rmse_limits[m] {
            return Err(CliError::Numerical(format!(
                "model adequacy gate failed for output {m}: held-out RMSE {:.3e} >= {:.3e}",
                holdout_rmse[m], rmse_limits[m]
            )));
        }
    }

    let xt_cols = Arc::new(crate::kernel::to_col_major(
        x_full.data(),
        x_full.nrows(),
        x_full.ncols(),
    ));
    let ensemble = GpEnsemble {
        x: x_full,
        xt_cols,
        outputs,
        normalizer: norm,
        dt: dataset.dt,
    };
    let path = out.model();
    ensemble.save(&path)?;
    Ok(FitSummary {
        reports,
        holdout_rmse,
        rmse_limits,
        cache_seconds,
        n,
        path,
    })
}

#[derive(Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_mean_return: f64,
    pub final_mean_return: f64,
    pub stopped_early: bool,
    pub policy_path: PathBuf,
    pub log_path: PathBuf,
}

/// Physical per-dimension state bounds recovered from the training data.
fn state_bounds_from(ensemble: &GpEnsemble) -> Vec<(f64, f64)> {
    let p = ensemble.p();
    let x = ensemble.x.as_ref();
    let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); p];
    for i in 0..x.nrows() {
        for c in 0..p {
            let v = ensemble.normalizer.denormalize_value(c, x.get2(i, c));
            bounds[c].0 = bounds[c].0.min(v);
            bounds[c].1 = bounds[c].1.max(v);
        }
    }
    bounds
}

pub fn cmd_train(
    cfg: &RunConfig,
    model_path: &Path,
    out: &OutPaths,
    goal_conditioned: bool,
    max_steps_override: Option<usize>,
) -> Result<TrainSummary, CliError> {
    let ensemble = GpEnsemble::load(model_path)?;
    let goal_conditioned = goal_conditioned || cfg.goal_conditioned;
    let p = ensemble.p();
    let q = ensemble.q();

    let mut tcfg = cfg.train.clone();
    tcfg.seed = cfg.seed;
    if let Some(ms) = max_steps_override {
        tcfg.max_steps = ms;
    }
    if goal_conditioned {
        // Generalized training: states and goals sampled uniformly within
        // the bounds observed in the data.
        tcfg.init_state_mode = trainer::SampleMode::Uniform;
        tcfg.goal_mode = trainer::SampleMode::Uniform;
        let bounds = state_bounds_from(&ensemble);
        tcfg.state_bounds = bounds.clone();
        tcfg.goal_bounds = bounds;
    }
    if tcfg.variance == gp::VarianceKind::Root
        && ensemble.outputs.iter().any(|o| o.cache.root.is_none())
    {
        return Err(CliError::Usage(
            "train.variance = root but the model file has no variance root; refit with fit.root_rank > 0".into(),
        ));
    }

    let policy = MlpPolicy::init(
        p,
        if goal_conditioned { p } else { 0 },
        &cfg.policy_hidden,
        q,
        cfg.seed,
        cfg.policy_init,
    )?;
    let reward = RewardParams::new(cfg.reward_q.clone(), cfg.reward_sigma_r);

    let log_path = out.train_log();
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(io_err)?);
    let result = trainer::train_policy(&ensemble, policy, &tcfg, &reward, Some(&mut log_file))?;
    log_file.flush().map_err(io_err)?;

    let policy_path = out.policy();
    result
        .policy
        .save(&policy_path, Some(&ensemble.normalizer))?;
    Ok(TrainSummary {
        steps: result.log.len(),
        initial_mean_return: result.log.first().map(|r| r.mean_return).unwrap_or(0.0),
        final_mean_return: result.final_mean_return,
        stopped_early: result.stopped_early,
        policy_path,
        log_path,
    })
}

#[derive(Debug)]
pub struct EvalSummary {
    pub per_goal: Vec<GoalAggregate>,
    pub metrics_path: PathBuf,
    pub traj_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct GoalAggregate {
    pub goal_phi: f64,
    pub episodes: usize,
    pub settle_rate: f64,
    pub mean_settling_s: f64,
    pub mean_sse: f64,
    pub max_sse: f64,
    pub mean_overshoot: f64,
    pub success_rate: f64,
}

pub const EVAL_CSV_HEADER: &str =
    "goal_phi,episodes,settle_rate,mean_settling_s,mean_sse,max_sse,mean_overshoot,success_rate";

pub fn cmd_eval(
    cfg: &RunConfig,
    model_path: &Path,
    policy_path: &Path,
    out: &OutPaths,
) -> Result<EvalSummary, CliError> {
    let ensemble = GpEnsemble::load(model_path)?;
    let (policy, stored_norm) = MlpPolicy::load(policy_path)?;
    let normalizer = stored_norm.unwrap_or_else(|| ensemble.normalizer.clone());
    if policy.state_dim != ensemble.p() || normalizer.dim() != ensemble.normalizer.dim() {
        return Err(CliError::Usage(format!(
            "policy ({} states, normalizer dim {}) does not match model ({} states, dim {})",
            policy.state_dim,
            normalizer.dim(),
            ensemble.p(),
            ensemble.normalizer.dim()
        )));
    }

    let eval_root = StreamRng::new(cfg.seed, "eval-episodes");
    let episodes = cfg.eval_episodes.max(1);
    let mut agg: Vec<Vec<env::GoalMetrics>> = vec![Vec::new(); cfg.eval_goals.len()];
    let mut first_traj: Vec<env::TrajPoint> = Vec::new();
    for e in 0..episodes {
        let report = env::evaluate_policy(
            &cfg.plant,
            &policy,
            &normalizer,
            PlantState::new(cfg.eval_initial_angle, 0.0),
            &cfg.eval_goals,
            cfg.eval_steps_per_goal,
            eval_root.substream(&[e as u64]).key(),
        );
        if e == 0 {
            first_traj = report.trajectory;
        }
        for (g, m) in report.per_goal.into_iter().enumerate() {
            agg[g].push(m);
        }
    }

    let mut per_goal = Vec::with_capacity(cfg.eval_goals.len());
    for (g, metrics) in agg.iter().enumerate() {
        let n = metrics.len() as f64;
        let settled: Vec<f64> = metrics.iter().filter_map(|m| m.settling_time).collect();
        per_goal.push(GoalAggregate {
            goal_phi: cfg.eval_goals[g],
            episodes: metrics.len(),
            settle_rate: settled.len() as f64 / n,
            mean_settling_s: if settled.is_empty() {
                f64::NAN
            } else {
                settled.iter().sum::<f64>() / settled.len() as f64
            },
            mean_sse: metrics.iter().map(|m| m.steady_state_error).sum::<f64>() / n,
            max_sse: metrics
                .iter()
                .map(|m| m.steady_state_error)
                .fold(0.0, f64::max),
            mean_overshoot: metrics.iter().map(|m| m.overshoot).sum::<f64>() / n,
            success_rate: metrics
                .iter()
                .filter(|m| m.steady_state_error < env::SETTLING_BAND)
                .count() as f64
                / n,
        });
    }

    let metrics_path = out.eval_metrics();
    let mut f = std::io::BufWriter::new(std::fs::File::create(&metrics_path).map_err(io_err)?);
    writeln!(f, "{EVAL_CSV_HEADER}").map_err(io_err)?;
    for row in &per_goal {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            row.goal_phi,
            row.episodes,
            row.settle_rate,
            row.mean_settling_s,
            row.mean_sse,
            row.max_sse,
            row.mean_overshoot,
            row.success_rate
        )
        .map_err(io_err)?;
    }
    f.flush().map_err(io_err)?;

    let traj_path = out.eval_traj();
    let mut f = std::io::BufWriter::new(std::fs::File::create(&traj_path).map_err(io_err)?);
    writeln!(f, "t,phi,phidot,u,goal_phi").map_err(io_err)?;
    for pt in &first_traj {
        writeln!(f, "{},{},{},{},{}", pt.t, pt.phi, pt.phidot, pt.u, pt.goal_phi)
            .map_err(io_err)?;
    }
    f.flush().map_err(io_err)?;

    Ok(EvalSummary {
        per_goal,
        metrics_path,
        traj_path,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Sweep,
    Compare,
    Both,
}

impl BenchMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sweep" => Some(BenchMode::Sweep),
            "compare" => Some(BenchMode::Compare),
            "both" => Some(BenchMode::Both),
            _ => None,
        }
    }
}

#[derive(Debug, Default)]
pub struct BenchSummary {
    pub sweep_path: Option<PathBuf>,
    pub curves_path: Option<PathBuf>,
    pub comparison: Option<ComparisonSummaryLine>,
}

#[derive(Debug, Clone)]
pub struct ComparisonSummaryLine {
    pub batch_mean_final: f64,
    pub seq_mean_final: f64,
    pub batch_updates_per_s: f64,
    pub seq_updates_per_s: f64,
}

pub fn write_sweep_csv(path: &Path, records: &[bench::BenchRecord]) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(f, "{}", bench::SWEEP_CSV_HEADER).map_err(io_err)?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.axis, r.value, r.repetitions, r.iter_ms_mean, r.iter_ms_min, r.iter_ms_max, r.peak_mb
        )
        .map_err(io_err)?;
    }
    f.flush().map_err(io_err)?;
    Ok(())
}

pub fn write_curves_csv(path: &Path, result: &ComparisonResult) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(f, "{}", bench::CURVE_CSV_HEADER).map_err(io_err)?;
    for p in &result.points {
        writeln!(f, "{},{},{},{}", p.mode, p.trial, p.wall_s, p.mean_return).map_err(io_err)?;
    }
    f.flush().map_err(io_err)?;
    Ok(())
}

pub fn cmd_bench(
    cfg: &RunConfig,
    model_path: &Path,
    out: &OutPaths,
    mode: BenchMode,
) -> Result<BenchSummary, CliError> {
    let ensemble = GpEnsemble::load(model_path)?;
    let mut summary = BenchSummary::default();
    if matches!(mode, BenchMode::Sweep | BenchMode::Both) {
        let mut bcfg = cfg.bench.clone();
        bcfg.seed = cfg.seed;
        let records = bench::run_scaling_sweep(&ensemble, &bcfg)?;
        let path = out.bench_sweep();
        write_sweep_csv(&path, &records)?;
        summary.sweep_path = Some(path);
    }
    if matches!(mode, BenchMode::Compare | BenchMode::Both) {
        let mut ccfg = cfg.compare.clone();
        ccfg.seed = cfg.seed;
        ccfg.variance = cfg.train.variance;
        ccfg.hidden = cfg.policy_hidden.clone();
        ccfg.fixed_init = cfg.train.fixed_init.clone();
        ccfg.fixed_goal = cfg.train.fixed_goal.clone();
        ccfg.learning_rate = cfg.train.learning_rate;
        let result = bench::run_learning_comparison(&ensemble, &ccfg)?;
        let path = out.learning_curves();
        write_curves_csv(&path, &result)?;
        summary.comparison = Some(ComparisonSummaryLine {
            batch_mean_final: result.batch.mean_final,
            seq_mean_final: result.sequential.mean_final,
            batch_updates_per_s: result.batch.updates_per_second,
            seq_updates_per_s: result.sequential.updates_per_second,
        });
        summary.curves_path = Some(path);
    }
    Ok(summary)
}
