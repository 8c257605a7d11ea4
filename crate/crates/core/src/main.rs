use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gprollout::cli::{self, BenchMode, CliError, OutPaths};
use gprollout::config::{load_config, RunConfig};

#[derive(Parser)]
#[command(
    name = "gprollout",
    about = "GP dynamics models and policy training over batched rollouts",
    version
)]
struct Cli {
    /// Flat key-value configuration file (see config.example).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the excitation schedule on the simulated boom and write dataset.csv.
    Collect {
        /// Override collect.duration (seconds).
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Fit GP hyperparameters, check held-out adequacy, write model.gpm.
    FitGp {
        /// Transition CSV (default: <out>/dataset.csv).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a policy against the fitted model; writes policy.gpp + train_log.csv.
    Train {
        /// Model file (default: <out>/model.gpm).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Goal-conditioned training: uniform states and goals, goal input.
        #[arg(long)]
        goal_conditioned: bool,
        /// Override train.max_steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Run the trained policy on the true plant and report tracking metrics.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Scaling sweeps and batch-vs-sequential learning comparison.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
        /// sweep | compare | both
        #[arg(long, default_value = "sweep")]
        mode: String,
    },
}

fn run() -> Result<(), CliError> {
    let args = Cli::parse();
    let mut cfg: RunConfig = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out_dir = args.out.clone().ok_or_else(|| {
        CliError::Usage(
            "missing --out DIR (where artifacts are written)\n\
             usage: gprollout --out DIR [--config PATH] [--seed N] <collect|fit-gp|train|eval|bench>"
                .into(),
        )
    })?;
    let out = OutPaths::new(&out_dir)?;

    match args.cmd {
        Cmd::Collect { duration } => {
            let s = cli::cmd_collect(&cfg, &out, duration)?;
            println!(
                "collected {} rows ({} transitions), angle coverage {:.1}% -> {}",
                s.rows,
                s.transitions,
                s.coverage * 100.0,
                s.path.display()
            );
        }
        Cmd::FitGp { data } => {
            let data_path = data.unwrap_or_else(|| out.dataset());
            let s = cli::cmd_fit_gp(&cfg, &data_path, &out)?;
            for r in &s.reports {
                println!(
                    "output {}: log-likelihood {:.3} -> {:.3} in {} steps ({:.2} s fit, n_fit={})",
                    r.output, r.initial_ll, r.final_ll, r.steps, r.fit_seconds, r.n_fit
                );
            }
            for (m, (rmse, limit)) in s.holdout_rmse.iter().zip(s.rmse_limits.iter()).enumerate() {
                println!("output {m}: held-out RMSE {rmse:.4e} (gate {limit:.4e})");
            }
            println!(
                "cache build {:.2} s on n={} -> {}",
                s.cache_seconds,
                s.n,
                s.path.display()
            );
        }
        Cmd::Train {
            model,
            goal_conditioned,
            max_steps,
        } => {
            let model_path = model.unwrap_or_else(|| out.model());
            let s = cli::cmd_train(&cfg, &model_path, &out, goal_conditioned, max_steps)?;
            println!(
                "trained {} steps: mean return {:.4} -> {:.4}{} -> {}",
                s.steps,
                s.initial_mean_return,
                s.final_mean_return,
                if s.stopped_early { " (early stop)" } else { "" },
                s.policy_path.display()
            );
            println!("log: {}", s.log_path.display());
        }
        Cmd::Eval { model, policy } => {
            let model_path = model.unwrap_or_else(|| out.model());
            let policy_path = policy.unwrap_or_else(|| out.policy());
            let s = cli::cmd_eval(&cfg, &model_path, &policy_path, &out)?;
            for g in &s.per_goal {
                println!(
                    "goal {:+.3} rad: sse {:.4} rad (max {:.4}), settle rate {:.0}%, success {:.0}%",
                    g.goal_phi,
                    g.mean_sse,
                    g.max_sse,
                    g.settle_rate * 100.0,
                    g.success_rate * 100.0
                );
            }
            println!(
                "metrics: {}  trajectory: {}",
                s.metrics_path.display(),
                s.traj_path.display()
            );
        }
        Cmd::Bench { model, mode } => {
            let mode = BenchMode::parse(&mode)
                .ok_or_else(|| CliError::Usage(format!("bad --mode `{mode}` (sweep|compare|both)")))?;
            let model_path = model.unwrap_or_else(|| out.model());
            let s = cli::cmd_bench(&cfg, &model_path, &out, mode)?;
            if let Some(p) = &s.sweep_path {
                println!("sweep results: {}", p.display());
            }
            if let Some(c) = &s.comparison {
                println!(
                    "batch final {:.4} ({:.1} updates/s) vs sequential final {:.4} ({:.1} updates/s)",
                    c.batch_mean_final, c.batch_updates_per_s, c.seq_mean_final, c.seq_updates_per_s
                );
            }
            if let Some(p) = &s.curves_path {
                println!("learning curves: {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
