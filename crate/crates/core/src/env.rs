//! Simulated hydraulic-boom plant: data collection and independent policy
//! evaluation.
//!
//! A damped second-order joint with actuator deadband, command slew limiting,
//! gravity torque and hard angle stops, integrated by semi-implicit Euler.
//! The plant generates transition datasets and closes the loop around a
//! trained policy; it never touches the GP.

use crate::array::Array;
use crate::data::{Normalizer, TransitionDataset};
use crate::policy::MlpPolicy;
use crate::rng::StreamRng;

#[derive(Debug, Clone)]
pub struct BoomParams {
    /// Angular acceleration per unit of deadband-filtered command.
    pub gain: f64,
    /// Velocity damping, 1/s.
    pub damping: f64,
    /// Fraction of the command range around zero that produces no drive.
    pub deadband: f64,
    /// Command slew limit, units/s.
    pub rate_limit: f64,
    /// Gravity torque coefficient: angular acceleration at horizontal.
    pub gravity: f64,
    /// Hard stops, radians.
    pub angle_limits: (f64, f64),
    /// Observation noise std for (angle, rate).
    pub noise_std: (f64, f64),
    pub dt: f64,
}

impl Default for BoomParams {
    fn default() -> Self {
        BoomParams {
            gain: 2.0,
            damping: 1.5,
            deadband: 0.1,
            rate_limit: 50.0,
            gravity: 0.5,
            angle_limits: (-1.2, 0.9),
            noise_std: (0.002, 0.01),
            dt: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub angle: f64,
    pub rate: f64,
}

impl PlantState {
    pub fn new(angle: f64, rate: f64) -> Self {
        PlantState { angle, rate }
    }

    pub fn as_vec(&self) -> Vec<f64> {
        vec![self.angle, self.rate]
    }
}

fn deadband_filter(u: f64, db: f64) -> f64 {
    if u.abs() < db {
        0.0
    } else {
        u.signum() * (u.abs() - db) / (1.0 - db)
    }
}

/// Simulator instance: true state plus the slew-limited actuator command.
#[derive(Debug, Clone)]
pub struct Plant {
    pub params: BoomParams,
    pub state: PlantState,
    cmd: f64,
}

impl Plant {
    pub fn new(params: BoomParams, initial: PlantState) -> Self {
        Plant {
            params,
            state: initial,
            cmd: 0.0,
        }
    }

    /// Advance one step under command `u` in [-1, 1]. Returns the noisy
    /// observation of the new state; the true state stays internal.
    pub fn step(&mut self, u: f64, rng: &mut StreamRng) -> PlantState {
        let p = &self.params;
        let u = u.clamp(-1.0, 1.0);
        let max_delta = p.rate_limit * p.dt;
        self.cmd += (u - self.cmd).clamp(-max_delta, max_delta);
        let drive = deadband_filter(self.cmd, p.deadband);
        let acc = p.gain * drive - p.damping * self.state.rate - p.gravity * self.state.angle.cos();
        self.state.rate += acc * p.dt;
        self.state.angle += self.state.rate * p.dt;
        if self.state.angle <= p.angle_limits.0 {
            self.state.angle = p.angle_limits.0;
            self.state.rate = 0.0;
        } else if self.state.angle >= p.angle_limits.1 {
            self.state.angle = p.angle_limits.1;
            self.state.rate = 0.0;
        }
        PlantState {
            angle: self.state.angle + p.noise_std.0 * rng.next_normal(),
            rate: self.state.rate + p.noise_std.1 * rng.next_normal(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Excitation {
    /// Scripted raise/lower sweeps at two speeds.
    ManualProfile,
    /// Smoothed random actions (an OU process, clamped).
    RandomWalk,
}

impl Excitation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "manual_profile" => Some(Excitation::ManualProfile),
            "random_walk" => Some(Excitation::RandomWalk),
            _ => None,
        }
    }
}

/// Raw sample log: observed states and applied actions at each tick.
#[derive(Debug, Clone)]
pub struct SampleLog {
    pub times: Vec<f64>,
    pub states: Array,  // (steps+1) x 2 observed states
    pub actions: Array, // (steps+1) x 1; last row's action pads the log
}

impl SampleLog {
    /// Pair consecutive rows into transitions (the log is gap-free).
    pub fn to_dataset(&self, dt: f64) -> TransitionDataset {
        let rows = self.times.len();
        let n = rows - 1;
        let p = self.states.ncols();
        let q = self.actions.ncols();
        let mut states = Vec::with_capacity(n * p);
        let mut actions = Vec::with_capacity(n * q);
        let mut next_states = Vec::with_capacity(n * p);
        for k in 0..n {
            states.extend_from_slice(self.states.row(k));
            actions.extend_from_slice(self.actions.row(k));
            next_states.extend_from_slice(self.states.row(k + 1));
        }
        TransitionDataset {
            states: Array::matrix(n, p, states),
            actions: Array::matrix(n, q, actions),
            next_states: Array::matrix(n, p, next_states),
            dt,
        }
    }

    /// Fraction of the angle-stop range the observed angles covered.
    pub fn angle_coverage(&self, params: &BoomParams) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.states.nrows() {
            let a = self.states.get2(i, 0);
            lo = lo.min(a);
            hi = hi.max(a);
        }
        (hi - lo) / (params.angle_limits.1 - params.angle_limits.0)
    }
}

/// Run an excitation schedule for `duration` seconds and log every tick.
/// `duration / dt` steps produce `duration / dt` transitions.
pub fn collect_excitation_data(
    params: &BoomParams,
    duration: f64,
    excitation: Excitation,
    seed: u64,
) -> SampleLog {
    assert!(duration >= 10.0 * params.dt, "duration too short");
    let steps = (duration / params.dt).round() as usize;
    let mut rng = StreamRng::new(seed, "collect");
    let start = PlantState::new(
        0.75 * params.angle_limits.0 + 0.25 * params.angle_limits.1,
        0.0,
    );
    let mut plant = Plant::new(params.clone(), start);
    let mut obs = PlantState {
        angle: start.angle + params.noise_std.0 * rng.next_normal(),
        rate: start.rate + params.noise_std.1 * rng.next_normal(),
    };

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity((steps + 1) * 2);
    let mut actions = Vec::with_capacity(steps + 1);

    // Manual profile state: alternate raise/lower sweeps between the stops,
    // switching magnitude every sweep (a fast pass and a slow pass).
    let margin = 0.08 * (params.angle_limits.1 - params.angle_limits.0);
    let mut target_high = true;
    let mut sweep = 0usize;
    let mut ou = 0.0f64;

    for k in 0..=steps {
        let t = k as f64 * params.dt;
        let u = match excitation {
            Excitation::ManualProfile => {
                let angle = plant.state.angle;
                if target_high && angle >= params.angle_limits.1 - margin {
                    target_high = false;
                    sweep += 1;
                } else if !target_high && angle <= params.angle_limits.0 + margin {
                    target_high = true;
                    sweep += 1;
                }
                let magnitude = if sweep % 2 == 0 { 0.9 } else { 0.45 };
                let dither = 0.05 * rng.next_normal();
                let base = if target_high { magnitude } else { -magnitude };
                (base + dither).clamp(-1.0, 1.0)
            }
            Excitation::RandomWalk => {
                ou += 0.5 * (0.0 - ou) * params.dt + 1.2 * params.dt.sqrt() * rng.next_normal();
                ou = ou.clamp(-1.0, 1.0);
                ou
            }
        };
        times.push(t);
        states.push(obs.angle);
        states.push(obs.rate);
        actions.push(u);
        if k < steps {
            obs = plant.step(u, &mut rng);
        }
    }
    SampleLog {
        times,
        states: Array::matrix(steps + 1, 2, states),
        actions: Array::matrix(steps + 1, 1, actions),
    }
}

#[derive(Debug, Clone)]
pub struct GoalMetrics {
    pub goal_angle: f64,
    /// Seconds until the angle enters the band and stays there, if it does.
    pub settling_time: Option<f64>,
    /// Mean |angle - goal| over the last 20% of the segment.
    pub steady_state_error: f64,
    /// Largest excursion past the goal in the approach direction.
    pub overshoot: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TrajPoint {
    pub t: f64,
    pub phi: f64,
    pub phidot: f64,
    pub u: f64,
    pub goal_phi: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_goal: Vec<GoalMetrics>,
    pub trajectory: Vec<TrajPoint>,
}

pub const SETTLING_BAND: f64 = 0.05;

/// Close the loop on the true plant: observations are normalized for the
/// policy, actions drive the simulator directly. Metrics use true state.
pub fn evaluate_policy(
    params: &BoomParams,
    policy: &MlpPolicy,
    normalizer: &Normalizer,
    initial: PlantState,
    goal_angles: &[f64],
    steps_per_goal: usize,
    seed: u64,
) -> EvalReport {
    let mut rng = StreamRng::new(seed, "eval");
    let mut plant = Plant::new(params.clone(), initial);
    let mut obs = plant.state;
    let mut trajectory = Vec::new();
    let mut per_goal = Vec::new();
    let mut t = 0.0f64;

    for &goal in goal_angles {
        let goal_vec = normalizer.normalize_state(&[goal, 0.0]);
        let mut angles = Vec::with_capacity(steps_per_goal);
        let start_angle = plant.state.angle;
        for _ in 0..steps_per_goal {
            let s = normalizer.normalize_state(&obs.as_vec());
            let a = policy
                .act_row(&s, &goal_vec)
                .expect("policy dimensions checked by caller");
            let u = a[0].clamp(-1.0, 1.0);
            trajectory.push(TrajPoint {
                t,
                phi: plant.state.angle,
                phidot: plant.state.rate,
                u,
                goal_phi: goal,
            });
            obs = plant.step(u, &mut rng);
            t += params.dt;
            angles.push(plant.state.angle);
        }
        per_goal.push(segment_metrics(&angles, start_angle, goal, params.dt));
    }
    EvalReport {
        per_goal,
        trajectory,
    }
}

fn segment_metrics(angles: &[f64], start: f64, goal: f64, dt: f64) -> GoalMetrics {
    let n = angles.len();
    // settling: first index after which the angle never leaves the band
    let mut settled_from = None;
    for k in (0..n).rev() {
        if (angles[k] - goal).abs() > SETTLING_BAND {
            break;
        }
        settled_from = Some(k);
    }
    let settling_time = settled_from.map(|k| (k + 1) as f64 * dt);
    let tail = (n as f64 * 0.8) as usize;
    let sse = angles[tail..]
        .iter()
        .map(|&a| (a - goal).abs())
        .sum::<f64>()
        / (n - tail) as f64;
    let dir = (goal - start).signum();
    let overshoot = angles
        .iter()
        .map(|&a| (a - goal) * dir)
        .fold(0.0f64, f64::max);
    GoalMetrics {
        goal_angle: goal,
        settling_time,
        steady_state_error: sse,
        overshoot,
    }
}
