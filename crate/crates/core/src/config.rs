//! Flat key-value run configuration: `section.key = value`, `#` comments.
//!
//! Every field has a default, so an empty config is valid and runnable.
//! Unknown keys are rejected with their line number; silent typos are how
//! experiments quietly diverge from what their author thinks they ran.

use std::path::Path;

use crate::bench::{BenchConfig, ComparisonConfig, SweepAxis};
use crate::env::{BoomParams, Excitation};
use crate::gp::{FitConfig, VarianceKind};
use crate::policy::InitScheme;
use crate::trainer::{SampleMode, TrainConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    BadValue {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    BadLine { line: usize, text: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub plant: BoomParams,
    pub collect_duration: f64,
    pub collect_excitation: Excitation,
    pub fit: FitConfig,
    pub fit_root_rank: usize,
    pub fit_holdout_fraction: f64,
    pub reward_q: Vec<f64>,
    pub reward_sigma_r: f64,
    pub train: TrainConfig,
    pub goal_conditioned: bool,
    pub policy_hidden: Vec<usize>,
    pub policy_init: InitScheme,
    pub eval_goals: Vec<f64>,
    pub eval_steps_per_goal: usize,
    pub eval_episodes: usize,
    pub eval_initial_angle: f64,
    pub bench: BenchConfig,
    pub compare: ComparisonConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            plant: BoomParams::default(),
            collect_duration: 110.0,
            collect_excitation: Excitation::ManualProfile,
            fit: FitConfig::default(),
            fit_root_rank: 256,
            fit_holdout_fraction: 0.2,
            reward_q: vec![10.0, 0.1],
            reward_sigma_r: 1.0,
            train: TrainConfig::default(),
            goal_conditioned: false,
            policy_hidden: vec![8, 8],
            policy_init: InitScheme::He,
            eval_goals: vec![-0.8, -0.2, 0.4, 0.1],
            eval_steps_per_goal: 160,
            eval_episodes: 20,
            eval_initial_angle: -0.9,
            bench: BenchConfig::default(),
            compare: ComparisonConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.trim().parse::<T>().map_err(|_| format!("cannot parse `{v}`"))
}

fn parse_list_f64(v: &str) -> Result<Vec<f64>, String> {
    v.split(',').map(|t| parse_num::<f64>(t)).collect()
}

fn parse_list_usize(v: &str) -> Result<Vec<usize>, String> {
    v.split(',').map(|t| parse_num::<usize>(t)).collect()
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(format!("expected true/false, got `{other}`")),
    }
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(v)?,

            "plant.gain" => self.plant.gain = parse_num(v)?,
            "plant.damping" => self.plant.damping = parse_num(v)?,
            "plant.deadband" => self.plant.deadband = parse_num(v)?,
            "plant.rate_limit" => self.plant.rate_limit = parse_num(v)?,
            "plant.gravity" => self.plant.gravity = parse_num(v)?,
            "plant.angle_min" => self.plant.angle_limits.0 = parse_num(v)?,
            "plant.angle_max" => self.plant.angle_limits.1 = parse_num(v)?,
            "plant.noise_angle" => self.plant.noise_std.0 = parse_num(v)?,
            "plant.noise_rate" => self.plant.noise_std.1 = parse_num(v)?,
            "plant.dt" => self.plant.dt = parse_num(v)?,

            "collect.duration" => self.collect_duration = parse_num(v)?,
            "collect.excitation" => {
                self.collect_excitation = Excitation::parse(v)
                    .ok_or_else(|| format!("expected manual_profile|random_walk, got `{v}`"))?
            }

            "fit.max_steps" => self.fit.max_steps = parse_num(v)?,
            "fit.learning_rate" => self.fit.learning_rate = parse_num(v)?,
            "fit.grad_tol" => self.fit.grad_tol = parse_num(v)?,
            "fit.rel_tol" => self.fit.rel_tol = parse_num(v)?,
            "fit.subset" => self.fit.subset = parse_num(v)?,
            "fit.root_rank" => self.fit_root_rank = parse_num(v)?,
            "fit.holdout_fraction" => self.fit_holdout_fraction = parse_num(v)?,

            "reward.q" => self.reward_q = parse_list_f64(v)?,
            "reward.sigma_r" => self.reward_sigma_r = parse_num(v)?,

            "train.batch_size" => self.train.batch_size = parse_num(v)?,
            "train.horizon" => self.train.horizon = parse_num(v)?,
            "train.learning_rate" => self.train.learning_rate = parse_num(v)?,
            "train.max_steps" => self.train.max_steps = parse_num(v)?,
            "train.init_state_mode" => {
                self.train.init_state_mode = SampleMode::parse(v)
                    .ok_or_else(|| format!("expected fixed|uniform, got `{v}`"))?
            }
            "train.goal_mode" => {
                self.train.goal_mode = SampleMode::parse(v)
                    .ok_or_else(|| format!("expected fixed|uniform, got `{v}`"))?
            }
            "train.fixed_init" => self.train.fixed_init = parse_list_f64(v)?,
            "train.fixed_goal" => self.train.fixed_goal = parse_list_f64(v)?,
            "train.goal_conditioned" => self.goal_conditioned = parse_bool(v)?,
            "train.chunk_size" => self.train.chunk_size = parse_num(v)?,
            "train.memory_budget_mb" => self.train.memory_budget_mb = parse_num(v)?,
            "train.variance" => {
                self.train.variance = match v {
                    "root" => VarianceKind::Root,
                    "exact" => VarianceKind::Exact,
                    other => return Err(format!("expected root|exact, got `{other}`")),
                }
            }
            "train.stop_window" => self.train.stop_window = parse_num(v)?,
            "train.stop_rel_tol" => self.train.stop_rel_tol = parse_num(v)?,
            "train.policy_hidden" => self.policy_hidden = parse_list_usize(v)?,
            "train.policy_init" => {
                self.policy_init = InitScheme::parse(v)
                    .ok_or_else(|| format!("expected he|standard_normal, got `{v}`"))?
            }

            "eval.goals" => self.eval_goals = parse_list_f64(v)?,
            "eval.steps_per_goal" => self.eval_steps_per_goal = parse_num(v)?,
            "eval.episodes" => self.eval_episodes = parse_num(v)?,
            "eval.initial_angle" => self.eval_initial_angle = parse_num(v)?,

            "bench.axis" => {
                self.bench.axis = SweepAxis::parse(v)
                    .ok_or_else(|| format!("expected batch_size|horizon|policy_layers, got `{v}`"))?
            }
            "bench.values" => self.bench.values = parse_list_usize(v)?,
            "bench.repetitions" => self.bench.repetitions = parse_num(v)?,
            "bench.warmup" => self.bench.warmup = parse_num(v)?,
            "bench.batch_size" => self.bench.batch_size = parse_num(v)?,
            "bench.horizon" => self.bench.horizon = parse_num(v)?,
            "bench.hidden" => self.bench.hidden = parse_list_usize(v)?,
            "bench.parallel" => self.bench.parallel = parse_bool(v)?,
            "bench.memory_budget_mb" => self.bench.memory_budget_mb = parse_num(v)?,

            "compare.trials" => self.compare.trials = parse_num(v)?,
            "compare.wall_budget_s" => self.compare.wall_budget_s = parse_num(v)?,
            "compare.batch_size" => self.compare.batch_size = parse_num(v)?,
            "compare.horizon" => self.compare.horizon = parse_num(v)?,

            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |msg: String| Err(ConfigError::Invalid(msg));
        if self.train.batch_size < 1 || self.train.horizon < 1 {
            return inv(format!(
                "train.batch_size and train.horizon must be >= 1 (got {}, {})",
                self.train.batch_size, self.train.horizon
            ));
        }
        if self.plant.dt <= 0.0 {
            return inv(format!("plant.dt must be positive, got {}", self.plant.dt));
        }
        if !(0.0..0.5).contains(&self.plant.deadband) {
            return inv(format!(
                "plant.deadband must be in [0, 0.5), got {}",
                self.plant.deadband
            ));
        }
        if self.plant.angle_limits.0 >= self.plant.angle_limits.1 {
            return inv(format!(
                "plant.angle limits must be ordered, got [{}, {}]",
                self.plant.angle_limits.0, self.plant.angle_limits.1
            ));
        }
        if self.reward_sigma_r <= 0.0 {
            return inv("reward.sigma_r must be positive".into());
        }
        if self.reward_q.iter().any(|&q| q < 0.0) || !self.reward_q.iter().any(|&q| q > 0.0) {
            return inv(format!(
                "reward.q must be non-negative with at least one positive entry, got {:?}",
                self.reward_q
            ));
        }
        if !(0.0..0.9).contains(&self.fit_holdout_fraction) {
            return inv(format!(
                "fit.holdout_fraction must be in [0, 0.9), got {}",
                self.fit_holdout_fraction
            ));
        }
        self.bench
            .validate()
            .map_err(ConfigError::Invalid)?;
        Ok(())
    }
}

/// Parse config text. Section prefixes live inside the key itself
/// (`train.batch_size = 100`).
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = match raw.find('#') {
            Some(at) => &raw[..at],
            None => raw,
        };
        let stripped = stripped.trim();
        if stripped.is_empty() {
            continue;
        }
        let Some((key, value)) = stripped.split_once('=') else {
            return Err(ConfigError::BadLine {
                line,
                text: stripped.to_string(),
            });
        };
        let key = key.trim();
        cfg.apply(key, value).map_err(|msg| {
            if msg.starts_with("unknown key") {
                ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                }
            } else {
                ConfigError::BadValue {
                    line,
                    key: key.to_string(),
                    msg,
                }
            }
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.train.batch_size, 100);
        assert_eq!(cfg.train.horizon, 300);
        assert_eq!(cfg.train.learning_rate, 1e-2);
        assert_eq!(cfg.reward_q, vec![10.0, 0.1]);
        assert_eq!(cfg.policy_hidden, vec![8, 8]);
        cfg.validate().unwrap();
    }

    #[test]
    fn parses_sections_and_comments() {
        let text = "\
# experiment setup
seed = 7
train.batch_size = 25   # smaller sweep
plant.gravity = 0.25
reward.q = 5,0.5
bench.values = 10,20,40
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.batch_size, 25);
        assert_eq!(cfg.plant.gravity, 0.25);
        assert_eq!(cfg.reward_q, vec![5.0, 0.5]);
        assert_eq!(cfg.bench.values, vec![10, 20, 40]);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let err = parse_config("train.batchsize = 10\n").unwrap_err();
        match err {
            ConfigError::UnknownKey { line, key } => {
                assert_eq!(line, 1);
                assert_eq!(key, "train.batchsize");
            }
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn bad_values_are_reported() {
        let err = parse_config("train.batch_size = ten\n").unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { line: 1, .. }));
        let err = parse_config("just a line\n").unwrap_err();
        assert!(matches!(err, ConfigError::BadLine { line: 1, .. }));
    }

    #[test]
    fn validation_catches_bad_combinations() {
        let err = parse_config("train.batch_size = 0\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
        let err = parse_config("plant.deadband = 0.7\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }
}
