//! Planar legged crawler with PD joints and a stance-kinematics body model.
//!
//! The body is built from one or more crawler modules joined rigidly front
//! to back. Each module has `legs` legs with a hip and a knee joint, ordered
//! `hip0, knee0, hip1, knee1, ...`; even legs are on the left. A leg is in
//! contact while its knee is above the contact threshold, and a hip moving
//! backwards during contact pushes the body forward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{numeric, structural, Error, Result};

/// Reward and goal setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Move in any direction.
    Intrinsic,
    /// Move along the world x axis.
    XAxis,
    /// Follow a receding sequence of waypoints.
    Goto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub modules: usize,
    pub legs: usize,
    pub dt: f64,
    pub kp: f64,
    pub kd: f64,
    pub torque_max: f64,
    pub motor_gain: f64,
    pub motor_time_constant: f64,
    pub joint_limit: f64,
    pub stride_gain: f64,
    pub yaw_gain: f64,
    pub height_gain: f64,
    pub tip_height: f64,
    pub contact_threshold: f64,
    pub stride_jitter: f64,
    /// Joints held at zero for the whole episode.
    pub frozen_joints: Vec<usize>,
    pub task: Task,
    pub waypoint_period: u64,
    pub waypoint_distance: (f64, f64),
    /// Largest change of the waypoint path direction between waypoints.
    pub waypoint_turn: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            modules: 1,
            legs: 4,
            dt: 0.01,
            kp: 4.0,
            kd: 0.2,
            torque_max: 4.0,
            motor_gain: 10.0,
            motor_time_constant: 0.05,
            joint_limit: 1.0,
            stride_gain: 0.5,
            yaw_gain: 0.5,
            height_gain: 0.1,
            tip_height: 0.08,
            contact_threshold: 0.0,
            stride_jitter: 0.1,
            frozen_joints: Vec::new(),
            task: Task::Intrinsic,
            waypoint_period: 100,
            waypoint_distance: (2.0, 4.0),
            waypoint_turn: std::f64::consts::FRAC_PI_4,
        }
    }
}

impl EnvConfig {
    pub fn joints(&self) -> usize {
        self.modules * self.joints_per_module()
    }

    pub fn joints_per_module(&self) -> usize {
        2 * self.legs
    }

    /// Length of the observation of one module seen on its own.
    pub fn module_obs_dim(&self) -> usize {
        2 * self.joints_per_module() + 3 + self.goal_dims()
    }

    /// Length of the full-body observation.
    pub fn obs_dim(&self) -> usize {
        2 * self.joints() + 3 + self.goal_dims()
    }

    fn goal_dims(&self) -> usize {
        if self.task == Task::Goto {
            2
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.modules == 0 || self.legs == 0 {
            return bad("modules and legs must be positive");
        }
        let positive = [
            self.dt,
            self.motor_gain,
            self.motor_time_constant,
            self.joint_limit,
            self.tip_height,
        ];
        if positive.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return bad("dt, motor constants, joint_limit and tip_height must be positive");
        }
        let nonneg = [
            self.kp,
            self.kd,
            self.torque_max,
            self.stride_gain,
            self.yaw_gain,
            self.height_gain,
        ];
        if nonneg.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad("gains must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.stride_jitter) {
            return bad("stride_jitter must lie in [0, 1)");
        }
        if self.dt / self.motor_time_constant > 1.0 {
            return bad("dt must not exceed the motor time constant");
        }
        if let Some(j) = self.frozen_joints.iter().find(|&&j| j >= self.joints()) {
            return bad(&format!("frozen joint {j} out of range"));
        }
        let (lo, hi) = self.waypoint_distance;
        if !(lo > 0.0 && hi >= lo) || self.waypoint_period == 0 {
            return bad("waypoint distance range and period must be positive");
        }
        if !(0.0..=PI).contains(&self.waypoint_turn) {
            return bad("waypoint_turn must lie in [0, pi]");
        }
        Ok(())
    }
}

/// Ground truth of the simulated body.
#[derive(Debug, Clone, PartialEq)]
pub struct CrawlerState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    /// World-frame linear velocity.
    pub velocity: [f64; 2],
    pub yaw_rate: f64,
    pub z: f64,
    pub joints: Vec<f64>,
    pub joint_rates: Vec<f64>,
    pub contact: Vec<bool>,
    pub frozen: Vec<bool>,
    pub step: u64,
    /// Per-episode stride gain after jitter.
    pub stride_gain: f64,
    pub goal: [f64; 2],
    /// Path length travelled this episode.
    pub distance: f64,
    /// Direction of the waypoint path.
    pub path_heading: f64,
}

impl CrawlerState {
    pub fn rest(cfg: &EnvConfig) -> Self {
        let n = cfg.joints();
        let mut frozen = vec![false; n];
        for &j in &cfg.frozen_joints {
            frozen[j] = true;
        }
        Self {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            velocity: [0.0; 2],
            yaw_rate: 0.0,
            z: 0.0,
            joints: vec![0.0; n],
            joint_rates: vec![0.0; n],
            contact: vec![false; cfg.modules * cfg.legs],
            frozen,
            step: 0,
            stride_gain: cfg.stride_gain,
            goal: [0.0; 2],
            distance: 0.0,
            path_heading: 0.0,
        }
    }

    /// Velocity rotated into the body frame: (forward, left).
    pub fn body_velocity(&self) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let [vx, vy] = self.velocity;
        [c * vx + s * vy, -s * vx + c * vy]
    }

    /// Unit vector from the body to the goal in the body frame, or zeros
    /// when the goal is closer than `GOAL_EPS`.
    pub fn goal_direction_body(&self) -> [f64; 2] {
        let (dx, dy) = (self.goal[0] - self.x, self.goal[1] - self.y);
        let d = dx.hypot(dy);
        if d < GOAL_EPS {
            return [0.0; 2];
        }
        let (s, c) = self.heading.sin_cos();
        [(c * dx + s * dy) / d, (-s * dx + c * dy) / d]
    }

    pub fn goal_direction_world(&self) -> [f64; 2] {
        let (dx, dy) = (self.goal[0] - self.x, self.goal[1] - self.y);
        let d = dx.hypot(dy);
        if d < GOAL_EPS {
            [0.0; 2]
        } else {
            [dx / d, dy / d]
        }
    }
}

/// Goals closer than this have no defined direction.
pub const GOAL_EPS: f64 = 1e-6;

/// Result of one [`env_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub state: CrawlerState,
    pub torque: Vec<f64>,
    /// Joint angle change per joint over the step.
    pub joint_delta: Vec<f64>,
}

/// Advances the body by one step under PD control toward `goals`.
pub fn env_step(cfg: &EnvConfig, state: &CrawlerState, goals: &[f64]) -> Result<StepOutput> {
    let n = cfg.joints();
    if goals.len() != n || state.joints.len() != n {
        return Err(structural(format!("expected {n} joint goals, got {}", goals.len())));
    }
    if goals.iter().any(|g| !g.is_finite()) {
        return Err(numeric(state.step, "non-finite joint goal"));
    }
    let mut next = state.clone();
    let mut torque = vec![0.0; n];
    let mut delta = vec![0.0; n];
    let lim = cfg.joint_limit;
    let blend = cfg.dt / cfg.motor_time_constant;
    for j in 0..n {
        if state.frozen[j] {
            continue;
        }
        let (s, sd) = (state.joints[j], state.joint_rates[j]);
        let goal = goals[j].clamp(-lim, lim);
        let tau = (cfg.kp * (goal - s) - cfg.kd * sd).clamp(-cfg.torque_max, cfg.torque_max);
        let rate = sd + blend * (cfg.motor_gain * tau - sd);
        let angle = (s + rate * cfg.dt).clamp(-lim, lim);
        torque[j] = tau;
        delta[j] = angle - s;
        next.joints[j] = angle;
        next.joint_rates[j] = if angle.abs() >= lim { 0.0 } else { rate };
    }

    let jpm = cfg.joints_per_module();
    let mut forward = 0.0;
    let mut turn = 0.0;
    let mut knees = 0.0;
    for m in 0..cfg.modules {
        let (mut push, mut left, mut right) = (0.0, 0.0, 0.0);
        for l in 0..cfg.legs {
            let hip = m * jpm + 2 * l;
            let knee = hip + 1;
            knees += next.joints[knee];
            let contact = next.joints[knee] > cfg.contact_threshold;
            next.contact[m * cfg.legs + l] = contact;
            if contact {
                let p = state.stride_gain * (-delta[hip]).max(0.0);
                push += p;
                if l % 2 == 0 {
                    left += p;
                } else {
                    right += p;
                }
            }
        }
        forward += push;
        turn += right - left;
    }
    let modules = cfg.modules as f64;
    forward /= modules;
    let dtheta = cfg.yaw_gain * turn / modules;
    let mid = state.heading + 0.5 * dtheta;
    let (s, c) = mid.sin_cos();
    next.x += forward * c;
    next.y += forward * s;
    next.heading = state.heading + dtheta;
    next.velocity = [forward * c / cfg.dt, forward * s / cfg.dt];
    next.yaw_rate = dtheta / cfg.dt;
    next.z = cfg.height_gain * knees / (cfg.modules * cfg.legs) as f64;
    next.distance += forward;
    next.step += 1;

    let finite = next.x.is_finite() && next.y.is_finite() && next.heading.is_finite();
    if !finite || next.joint_rates.iter().any(|v| !v.is_finite()) {
        return Err(numeric(next.step, "non-finite body state"));
    }
    Ok(StepOutput {
        state: next,
        torque,
        joint_delta: delta,
    })
}

/// Reward coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardCoefficients {
    pub velocity: f64,
    pub base: f64,
    pub yaw: f64,
    pub height: f64,
    pub joints: f64,
    pub alignment: f64,
}

impl Default for RewardCoefficients {
    fn default() -> Self {
        Self {
            velocity: 2.0,
            base: 4.0,
            yaw: 0.5,
            height: 5.0,
            joints: 1e-3,
            alignment: 5.0,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn penalties(c: &RewardCoefficients, s: &CrawlerState) -> f64 {
    c.yaw * s.yaw_rate.abs() + c.height * s.z.abs() + c.joints * norm(&s.joints)
}

/// Planar speed bonus minus yaw, height and joint penalties plus a constant.
pub fn reward_intrinsic(c: &RewardCoefficients, s: &CrawlerState) -> f64 {
    c.velocity * norm(&s.velocity) - penalties(c, s) + c.base
}

/// Intrinsic reward plus alignment of the velocity with the goal direction.
pub fn reward_goto(c: &RewardCoefficients, s: &CrawlerState) -> f64 {
    let e = s.goal_direction_world();
    reward_intrinsic(c, s) + c.alignment * (s.velocity[0] * e[0] + s.velocity[1] * e[1])
}

/// Intrinsic reward with the speed term restricted to the x component.
pub fn reward_xaxis(c: &RewardCoefficients, s: &CrawlerState) -> f64 {
    c.velocity * s.velocity[0].abs() - penalties(c, s) + c.base
}

pub fn reward(task: Task, c: &RewardCoefficients, s: &CrawlerState) -> f64 {
    match task {
        Task::Intrinsic => reward_intrinsic(c, s),
        Task::XAxis => reward_xaxis(c, s),
        Task::Goto => reward_goto(c, s),
    }
}

/// Total and per-joint work `Σ_t |τ·Δs|`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub total: f64,
    pub per_joint: Vec<f64>,
}

pub fn energy_audit(torques: &[Vec<f64>], deltas: &[Vec<f64>]) -> Result<EnergyReport> {
    if torques.len() != deltas.len() {
        return Err(structural("torque and joint-delta series differ in length"));
    }
    let n = torques.first().map_or(0, Vec::len);
    let mut per_joint = vec![0.0; n];
    for (t, d) in torques.iter().zip(deltas) {
        if t.len() != n || d.len() != n {
            return Err(structural("ragged torque or joint-delta rows"));
        }
        for j in 0..n {
            per_joint[j] += (t[j] * d[j]).abs();
        }
    }
    Ok(EnergyReport {
        total: per_joint.iter().sum(),
        per_joint,
    })
}

/// Full-body observation: joint angles, joint rates, body-frame velocity,
/// yaw rate and, for the goto task, the body-frame goal direction.
pub fn observe(cfg: &EnvConfig, s: &CrawlerState) -> Vec<f64> {
    let mut o = Vec::with_capacity(cfg.obs_dim());
    o.extend(&s.joints);
    o.extend(&s.joint_rates);
    o.extend(s.body_velocity());
    o.push(s.yaw_rate);
    if cfg.task == Task::Goto {
        o.extend(s.goal_direction_body());
    }
    o
}

/// One transition of the environment seen by a trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub reward: f64,
    pub done: bool,
    pub torque: Vec<f64>,
    pub joint_delta: Vec<f64>,
}

/// Stateful environment: episode resets, waypoint schedule, rewards and
/// termination around [`env_step`].
#[derive(Debug, Clone)]
pub struct CrawlerEnv {
    pub cfg: EnvConfig,
    pub rewards: RewardCoefficients,
    pub state: CrawlerState,
    pub rng: ChaCha8Rng,
    /// Episode length limit.
    pub max_steps: u64,
}

impl CrawlerEnv {
    pub fn new(cfg: EnvConfig, rewards: RewardCoefficients, max_steps: u64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if max_steps == 0 {
            return Err(Error::Config("episode length must be positive".into()));
        }
        let state = CrawlerState::rest(&cfg);
        Ok(Self {
            cfg,
            rewards,
            state,
            rng: ChaCha8Rng::seed_from_u64(seed),
            max_steps,
        })
    }

    /// Body at rest at the origin with zero joints, a random heading, a
    /// jittered stride gain and a waypoint path in a random direction.
    pub fn reset(&mut self) {
        let mut s = CrawlerState::rest(&self.cfg);
        s.heading = self.rng.random_range(-PI..PI);
        let j = self.cfg.stride_jitter;
        s.stride_gain = self.cfg.stride_gain * (1.0 + self.rng.random_range(-j..=j));
        s.path_heading = self.rng.random_range(-PI..PI);
        self.state = s;
        self.new_waypoint();
    }

    /// Receding horizon: the next waypoint lies ahead of the body along a
    /// path whose direction drifts by at most `waypoint_turn`.
    fn new_waypoint(&mut self) {
        let (lo, hi) = self.cfg.waypoint_distance;
        let r = self.rng.random_range(lo..=hi);
        let turn = self.cfg.waypoint_turn;
        let a = self.state.path_heading + self.rng.random_range(-turn..=turn);
        self.state.path_heading = a;
        self.state.goal = [self.state.x + r * a.cos(), self.state.y + r * a.sin()];
    }

    pub fn observe(&self) -> Vec<f64> {
        observe(&self.cfg, &self.state)
    }

    pub fn step(&mut self, goals: &[f64]) -> Result<EnvStep> {
        let out = env_step(&self.cfg, &self.state, goals)?;
        self.state = out.state;
        let reward = reward(self.cfg.task, &self.rewards, &self.state);
        let tipped = self.state.z.abs() > self.cfg.tip_height;
        let done = tipped || self.state.step >= self.max_steps;
        if self.cfg.task == Task::Goto && self.state.step % self.cfg.waypoint_period == 0 {
            self.new_waypoint();
        }
        Ok(EnvStep {
            reward,
            done,
            torque: out.torque,
            joint_delta: out.joint_delta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn obs_dims() {
        let cfg = EnvConfig::default();
        assert_eq!(cfg.obs_dim(), 19);
        let goto = EnvConfig {
            task: Task::Goto,
            ..EnvConfig::default()
        };
        assert_eq!(goto.obs_dim(), 21);
        let env = CrawlerEnv::new(goto, RewardCoefficients::default(), 2000, 1).unwrap();
        assert_eq!(env.observe().len(), 21);
    }

    #[test]
    fn rest_rewards_base() {
        let cfg = EnvConfig::default();
        let c = RewardCoefficients::default();
        let s = CrawlerState::rest(&cfg);
        assert_eq!(reward_intrinsic(&c, &s), 4.0);
        let mut moving = s.clone();
        moving.velocity = [0.6, 0.8];
        assert!((reward_intrinsic(&c, &moving) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn setpoint_is_a_fixed_point() {
        let cfg = EnvConfig::default();
        let mut s = CrawlerState::rest(&cfg);
        s.joints = (0..8).map(|j| 0.1 * j as f64 - 0.3).collect();
        let out = env_step(&cfg, &s, &s.joints.clone()).unwrap();
        assert!(out.torque.iter().all(|t| *t == 0.0));
        assert_eq!(out.state.x, 0.0);
        assert_eq!(out.state.joints, s.joints);
    }

    #[test]
    fn bad_goal_lengths_and_values() {
        let cfg = EnvConfig::default();
        let s = CrawlerState::rest(&cfg);
        assert!(matches!(env_step(&cfg, &s, &[0.0; 3]), Err(Error::Structural(_))));
        let mut g = vec![0.0; 8];
        g[2] = f64::NAN;
        assert!(matches!(env_step(&cfg, &s, &g), Err(Error::Numeric { .. })));
    }

    #[test]
    fn energy_arithmetic() {
        let t = vec![vec![1.0]; 100];
        let d = vec![vec![0.01]; 100];
        assert!((energy_audit(&t, &d).unwrap().total - 1.0).abs() < 1e-12);
        assert!(energy_audit(&t, &d[..5]).is_err());
    }
}
