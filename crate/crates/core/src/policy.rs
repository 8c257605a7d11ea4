//! Goal-conditioned feedforward policy with tanh-bounded outputs.
//!
//! Hidden and output activations are tanh, so actions always land in
//! [-1, 1] and gradients stay smooth through long rollouts. The goal enters
//! as extra input columns when `goal_conditioned` is set.

use std::path::Path;

use crate::array::Array;
use crate::container::{Container, ContainerError};
use crate::rng::StreamRng;
use crate::tape::{DiffError, Tape, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy needs at least input and output sizes")]
    EmptyLayers,
    #[error("input mismatch: policy expects {expected} columns, got {got}")]
    InputDim { expected: usize, got: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("file is a `{0}`, not a policy")]
    WrongKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    He,
    StandardNormal,
}

impl InitScheme {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "he" => Some(InitScheme::He),
            "standard_normal" => Some(InitScheme::StandardNormal),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            InitScheme::He => "he",
            InitScheme::StandardNormal => "standard_normal",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpPolicy {
    /// Full layer widths: input, hidden..., output.
    pub layer_sizes: Vec<usize>,
    /// Weight matrices, one per layer transition, stored (fan_in x fan_out).
    pub weights: Vec<Array>,
    /// Bias rows, one per layer transition, stored (1 x fan_out).
    pub biases: Vec<Array>,
    pub goal_conditioned: bool,
    pub state_dim: usize,
    pub goal_dim: usize,
}

impl MlpPolicy {
    /// Initialize parameters. `he` draws weights from N(0, 2/fan_in) with
    /// zero biases; `standard_normal` draws everything from N(0, 1).
    pub fn init(
        state_dim: usize,
        goal_dim: usize,
        hidden: &[usize],
        action_dim: usize,
        seed: u64,
        scheme: InitScheme,
    ) -> Result<Self, PolicyError> {
        if state_dim == 0 || action_dim == 0 {
            return Err(PolicyError::EmptyLayers);
        }
        let goal_conditioned = goal_dim > 0;
        let input = state_dim + goal_dim;
        let mut layer_sizes = vec![input];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(action_dim);

        let root = StreamRng::new(seed, "policy-init");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for li in 0..layer_sizes.len() - 1 {
            let fan_in = layer_sizes[li];
            let fan_out = layer_sizes[li + 1];
            let mut wrng = root.substream(&[li as u64, 0]);
            let mut brng = root.substream(&[li as u64, 1]);
            let (wstd, bstd) = match scheme {
                InitScheme::He => ((2.0 / fan_in as f64).sqrt(), 0.0),
                InitScheme::StandardNormal => (1.0, 1.0),
            };
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| wstd * wrng.next_normal())
                .collect();
            let b: Vec<f64> = (0..fan_out).map(|_| bstd * brng.next_normal()).collect();
            weights.push(Array::matrix(fan_in, fan_out, w));
            biases.push(Array::new(vec![1, fan_out], b));
        }
        Ok(MlpPolicy {
            layer_sizes,
            weights,
            biases,
            goal_conditioned,
            state_dim,
            goal_dim,
        })
    }

    pub fn action_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// Flatten all parameters (per layer: weights row-major, then biases).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut at = 0usize;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let wn = w.len();
            w.data_mut().copy_from_slice(&flat[at..at + wn]);
            at += wn;
            let bn = b.len();
            b.data_mut().copy_from_slice(&flat[at..at + bn]);
            at += bn;
        }
    }

    /// Register all parameters on a tape, in `params_flat` order.
    pub fn tape_params(&self, tape: &mut Tape) -> Vec<Var> {
        let mut vars = Vec::new();
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            vars.push(tape.param(w.clone()));
            vars.push(tape.param(b.clone()));
        }
        vars
    }

    /// Collect gradients corresponding to `tape_params` into flat order.
    pub fn grads_flat(&self, grads: &crate::tape::Gradients, vars: &[Var]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (li, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            out.extend_from_slice(grads.for_param(vars[2 * li], w.shape()).data());
            out.extend_from_slice(grads.for_param(vars[2 * li + 1], b.shape()).data());
        }
        out
    }

    /// Forward pass on a tape from parameter vars (as from `tape_params`).
    /// `states` is (b x p); `goals` is required iff the policy is
    /// goal-conditioned and ignored otherwise.
    pub fn act_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        states: Var,
        goals: Option<Var>,
    ) -> Result<Var, PolicyError> {
        let got = tape.shape(states)[1];
        if got != self.state_dim {
            return Err(PolicyError::InputDim {
                expected: self.state_dim,
                got,
            });
        }
        let mut h = if self.goal_conditioned {
            let g = goals.ok_or(PolicyError::InputDim {
                expected: self.state_dim + self.goal_dim,
                got,
            })?;
            tape.concat(&[states, g], 1)?
        } else {
            states
        };
        for li in 0..self.weights.len() {
            let z = tape.matmul(h, vars[2 * li])?;
            let zb = tape.add(z, vars[2 * li + 1])?;
            h = tape.tanh(zb)?;
        }
        Ok(h)
    }

    /// Plain forward pass for a single row, no tape.
    pub fn act_row(&self, state: &[f64], goal: &[f64]) -> Result<Vec<f64>, PolicyError> {
        if state.len() != self.state_dim {
            return Err(PolicyError::InputDim {
                expected: self.state_dim,
                got: state.len(),
            });
        }
        let mut h: Vec<f64> = if self.goal_conditioned {
            state.iter().chain(goal.iter()).copied().collect()
        } else {
            state.to_vec()
        };
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            let fan_in = w.nrows();
            let fan_out = w.ncols();
            let mut z = vec![0.0f64; fan_out];
            for o in 0..fan_out {
                let mut s = b.data()[o];
                for i in 0..fan_in {
                    s += h[i] * w.get2(i, o);
                }
                z[o] = s.tanh();
            }
            h = z;
        }
        Ok(h)
    }

    pub fn save(&self, path: &Path, normalizer: Option<&crate::data::Normalizer>) -> Result<(), PolicyError> {
        let mut c = Container::new();
        c.put_str("kind", "policy");
        c.put_vec(
            "layer_sizes",
            &self.layer_sizes.iter().map(|&s| s as f64).collect::<Vec<_>>(),
        );
        c.put_u64("goal_conditioned", self.goal_conditioned as u64);
        c.put_u64("state_dim", self.state_dim as u64);
        c.put_u64("goal_dim", self.goal_dim as u64);
        c.put_vec("params", &self.params_flat());
        if let Some(n) = normalizer {
            c.put_vec("norm.mean", &n.mean);
            c.put_vec("norm.std", &n.std);
            c.put_u64("norm.p", n.p as u64);
            c.put_u64("norm.q", n.q as u64);
        }
        c.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Option<crate::data::Normalizer>), PolicyError> {
        let c = Container::load(path)?;
        let kind = c.str("kind")?;
        if kind != "policy" {
            return Err(PolicyError::WrongKind(kind.to_string()));
        }
        let layer_sizes: Vec<usize> = c.vec("layer_sizes")?.iter().map(|&s| s as usize).collect();
        let goal_conditioned = c.u64("goal_conditioned")? != 0;
        let state_dim = c.u64("state_dim")? as usize;
        let goal_dim = c.u64("goal_dim")? as usize;
        let hidden = &layer_sizes[1..layer_sizes.len() - 1];
        let mut policy = MlpPolicy::init(
            state_dim,
            goal_dim,
            hidden,
            *layer_sizes.last().unwrap(),
            0,
            InitScheme::He,
        )?;
        policy.goal_conditioned = goal_conditioned;
        policy.set_params_flat(&c.vec("params")?);
        let normalizer = if c.has("norm.mean") {
            let mean = c.vec("norm.mean")?;
            let std = c.vec("norm.std")?;
            let flagged = vec![false; mean.len()];
            Some(crate::data::Normalizer {
                mean,
                std,
                flagged,
                p: c.u64("norm.p")? as usize,
                q: c.u64("norm.q")? as usize,
            })
        } else {
            None
        };
        Ok((policy, normalizer))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::ExecMode;

    #[test]
    fn same_seed_same_parameters() {
        let a = MlpPolicy::init(2, 2, &[8, 8], 1, 42, InitScheme::He).unwrap();
        let b = MlpPolicy::init(2, 2, &[8, 8], 1, 42, InitScheme::He).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
        let c = MlpPolicy::init(2, 2, &[8, 8], 1, 43, InitScheme::He).unwrap();
        assert_ne!(a.params_flat(), c.params_flat());
    }

    #[test]
    fn he_variance_statistics() {
        // fan_in 8 -> weight variance 2/8 = 0.25
        let p = MlpPolicy::init(8, 0, &[2000], 4, 7, InitScheme::He).unwrap();
        let w = &p.weights[0];
        let n = w.len() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let var: f64 = w.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((var - 0.25).abs() < 0.025, "variance {var}");
        // he biases are zero
        assert!(p.biases[0].data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn parameter_count_formula() {
        // sum (fan_in + 1) * fan_out over transitions 4->8->8->1
        let p = MlpPolicy::init(2, 2, &[8, 8], 1, 1, InitScheme::He).unwrap();
        let expect = 5 * 8 + 9 * 8 + 9 * 1;
        assert_eq!(p.param_count(), expect);
        assert_eq!(p.params_flat().len(), expect);
    }

    #[test]
    fn zero_parameters_zero_output() {
        let mut p = MlpPolicy::init(3, 0, &[4], 2, 5, InitScheme::He).unwrap();
        p.set_params_flat(&vec![0.0; p.param_count()]);
        let out = p.act_row(&[0.7, -2.0, 31.0], &[]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn outputs_bounded() {
        let mut rng = crate::rng::StreamRng::new(9, "bound");
        for trial in 0..200 {
            let p = MlpPolicy::init(2, 2, &[8], 2, trial, InitScheme::StandardNormal).unwrap();
            for _ in 0..50 {
                let s = [rng.next_normal() * 10.0, rng.next_normal() * 10.0];
                let g = [rng.next_normal() * 10.0, rng.next_normal() * 10.0];
                let a = p.act_row(&s, &g).unwrap();
                assert!(a.iter().all(|&v| (-1.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn batched_act_matches_single_rows() {
        let p = MlpPolicy::init(2, 2, &[8, 8], 1, 11, InitScheme::He).unwrap();
        let mut rng = crate::rng::StreamRng::new(12, "batch");
        let b = 100;
        let sdata: Vec<f64> = (0..b * 2).map(|_| rng.next_normal()).collect();
        let gdata: Vec<f64> = (0..b * 2).map(|_| rng.next_normal()).collect();
        let mut tape = Tape::with_mode(ExecMode::Sequential);
        let vars = p.tape_params(&mut tape);
        let sv = tape.leaf(Array::matrix(b, 2, sdata.clone()));
        let gv = tape.leaf(Array::matrix(b, 2, gdata.clone()));
        let out = p.act_tape(&mut tape, &vars, sv, Some(gv)).unwrap();
        for i in 0..b {
            let single = p
                .act_row(&sdata[i * 2..(i + 1) * 2], &gdata[i * 2..(i + 1) * 2])
                .unwrap();
            assert!(
                (tape.value(out).get2(i, 0) - single[0]).abs() < 1e-12,
                "row {i}"
            );
        }
    }

    #[test]
    fn action_gradients_match_finite_differences() {
        let p = MlpPolicy::init(2, 0, &[4], 1, 13, InitScheme::He).unwrap();
        let states = Array::matrix(3, 2, vec![0.1, -0.4, 0.9, 0.2, -0.6, 0.5]);
        let weights = p.weights.clone();
        let biases = p.biases.clone();
        let params: Vec<Array> = weights
            .iter()
            .cloned()
            .chain(biases.iter().cloned())
            .collect();
        let nw = weights.len();
        let err = crate::tape::grad_check(
            &mut |tape, vars| {
                let sv = tape.leaf(states.clone());
                let mut h = sv;
                for li in 0..nw {
                    let z = tape.matmul(h, vars[li])?;
                    let zb = tape.add(z, vars[nw + li])?;
                    h = tape.tanh(zb)?;
                }
                tape.mean_all(h)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn goal_columns_fold_into_bias() {
        let gc = MlpPolicy::init(2, 2, &[8, 8], 1, 21, InitScheme::He).unwrap();
        let goal = [0.37, -0.81];
        // Build the equivalent non-conditioned policy: first-layer goal rows
        // folded into the bias.
        let mut plain = MlpPolicy::init(2, 0, &[8, 8], 1, 0, InitScheme::He).unwrap();
        let w1 = &gc.weights[0]; // (4 x 8): rows 0..2 state, rows 2..4 goal
        let mut w1_state = Array::zeros(&[2, 8]);
        for i in 0..2 {
            for o in 0..8 {
                w1_state.set2(i, o, w1.get2(i, o));
            }
        }
        let mut b1 = gc.biases[0].clone();
        for o in 0..8 {
            let fold: f64 = (0..2).map(|gi| goal[gi] * w1.get2(2 + gi, o)).sum();
            let v = b1.data()[o] + fold;
            b1.data_mut()[o] = v;
        }
        plain.weights[0] = w1_state;
        plain.biases[0] = b1;
        plain.weights[1] = gc.weights[1].clone();
        plain.biases[1] = gc.biases[1].clone();
        plain.weights[2] = gc.weights[2].clone();
        plain.biases[2] = gc.biases[2].clone();

        let mut rng = crate::rng::StreamRng::new(22, "fold");
        for _ in 0..50 {
            let s = [rng.next_normal(), rng.next_normal()];
            let a = gc.act_row(&s, &goal).unwrap();
            let b = plain.act_row(&s, &[]).unwrap();
            assert!((a[0] - b[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let p = MlpPolicy::init(2, 2, &[8, 8], 1, 31, InitScheme::He).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        p.save(f.path(), None).unwrap();
        let (q, norm) = MlpPolicy::load(f.path()).unwrap();
        assert!(norm.is_none());
        assert_eq!(p.layer_sizes, q.layer_sizes);
        assert_eq!(p.params_flat(), q.params_flat());
        assert_eq!(p.goal_conditioned, q.goal_conditioned);
    }
}
