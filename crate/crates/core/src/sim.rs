//! Two-tier simulator for a planar differential-drive robot.
//!
//! Both tiers share the same unicycle dynamics with a first-order actuator
//! lag. The low-fidelity tier is the degenerate [`FidelityConfig`]: perfect
//! observations, no latency, a decision every physics step. The high-fidelity
//! tier adds Gaussian observation noise, actuation latency, and a slower
//! decision loop, all scheduled on simulated time.
//!
//! Frame conventions for [`Observation`]:
//! - `goal_dx`, `goal_dy`: position of the goal relative to the robot,
//!   expressed in the goal's frame (x along the goal heading). A robot 5 m
//!   east of a goal facing east sees `goal_dx = -5`.
//! - `relative_heading`: robot heading minus goal heading, wrapped.
//! - `bearing_to_goal`: direction from the robot to the goal location minus
//!   the robot heading, wrapped. Zero means the goal is dead ahead.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::f64::consts::PI;
use thiserror::Error;

use crate::geometry::{wrap_angle, Pose, PoseRegion};
use crate::hlm::{Subtask, SubtaskId};
use crate::seed::rng_for;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("start state lies outside the entry region of subtask `{0}`")]
    StartOutsideEntry(SubtaskId),
    #[error("invalid fidelity config: {0}")]
    InvalidConfig(String),
    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub linear_velocity: f64,
    pub angular_velocity: f64,
}

impl RobotState {
    pub fn at_rest(pose: Pose) -> Self {
        Self {
            x: pose.x,
            y: pose.y,
            heading: wrap_angle(pose.heading),
            linear_velocity: 0.0,
            angular_velocity: 0.0,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose {
            x: self.x,
            y: self.y,
            heading: self.heading,
        }
    }
}

/// Velocity command.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub v_cmd: f64,
    pub w_cmd: f64,
}

impl Action {
    pub const STOP: Action = Action { v_cmd: 0.0, w_cmd: 0.0 };

    pub fn new(v_cmd: f64, w_cmd: f64) -> Self {
        Self { v_cmd, w_cmd }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionLimits {
    pub v_min: f64,
    pub v_max: f64,
    pub w_min: f64,
    pub w_max: f64,
}

impl Default for ActionLimits {
    fn default() -> Self {
        Self {
            v_min: 0.0,
            v_max: 2.0,
            w_min: -1.0,
            w_max: 1.0,
        }
    }
}

impl ActionLimits {
    /// Clamps into bounds; the flag reports whether anything changed.
    /// Non-finite components become the lower bound.
    pub fn clamp(&self, a: Action) -> (Action, bool) {
        let fix = |v: f64, lo: f64, hi: f64| if v.is_nan() { lo } else { v.clamp(lo, hi) };
        let out = Action {
            v_cmd: fix(a.v_cmd, self.v_min, self.v_max),
            w_cmd: fix(a.w_cmd, self.w_min, self.w_max),
        };
        let changed = out.v_cmd.to_bits() != a.v_cmd.to_bits() || out.w_cmd.to_bits() != a.w_cmd.to_bits();
        (out, changed)
    }

    pub fn contains(&self, a: &Action) -> bool {
        (self.v_min..=self.v_max).contains(&a.v_cmd) && (self.w_min..=self.w_max).contains(&a.w_cmd)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = [self.v_min, self.v_max, self.w_min, self.w_max]
            .iter()
            .all(|v| v.is_finite())
            && self.v_min <= self.v_max
            && self.w_min <= self.w_max;
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidEnvironment(
                "action limits are inverted or non-finite".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub goal_dx: f64,
    pub goal_dy: f64,
    pub relative_heading: f64,
    pub bearing_to_goal: f64,
    pub linear_velocity: f64,
    pub angular_velocity: f64,
}

impl Observation {
    pub fn distance(&self) -> f64 {
        self.goal_dx.hypot(self.goal_dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    fn is_valid(&self) -> bool {
        [self.min_x, self.min_y, self.max_x, self.max_y]
            .iter()
            .all(|v| v.is_finite())
            && self.min_x < self.max_x
            && self.min_y < self.max_y
    }

    fn contains_rect(&self, o: &Rect) -> bool {
        o.min_x >= self.min_x && o.max_x <= self.max_x && o.min_y >= self.min_y && o.max_y <= self.max_y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Obstacle {
    Rect {
        min_x: f64,
        min_y: f64,
        max_x: f64,
        max_y: f64,
    },
    Circle {
        x: f64,
        y: f64,
        radius: f64,
    },
}

impl Obstacle {
    /// True iff a disc of radius `r` at `(x, y)` overlaps the obstacle's
    /// interior (touching is not a collision).
    pub fn overlaps_disc(&self, x: f64, y: f64, r: f64) -> bool {
        match *self {
            Obstacle::Rect {
                min_x,
                min_y,
                max_x,
                max_y,
            } => {
                let dx = (min_x - x).max(0.0).max(x - max_x);
                let dy = (min_y - y).max(0.0).max(y - max_y);
                dx * dx + dy * dy < r * r
            }
            Obstacle::Circle { x: cx, y: cy, radius } => (x - cx).hypot(y - cy) < r + radius,
        }
    }

    fn bounding_rect(&self) -> Rect {
        match *self {
            Obstacle::Rect {
                min_x,
                min_y,
                max_x,
                max_y,
            } => Rect {
                min_x,
                min_y,
                max_x,
                max_y,
            },
            Obstacle::Circle { x, y, radius } => Rect {
                min_x: x - radius,
                min_y: y - radius,
                max_x: x + radius,
                max_y: y + radius,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentMap {
    pub bounds: Rect,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub robot_radius: f64,
    #[serde(default)]
    pub action_limits: ActionLimits,
}

impl EnvironmentMap {
    pub fn open(bounds: Rect, robot_radius: f64) -> Self {
        Self {
            bounds,
            obstacles: Vec::new(),
            robot_radius,
            action_limits: ActionLimits::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !self.bounds.is_valid() {
            return Err(SimError::InvalidEnvironment("bounds are empty or non-finite".into()));
        }
        if !(self.robot_radius.is_finite() && self.robot_radius > 0.0) {
            return Err(SimError::InvalidEnvironment("robot_radius must be positive".into()));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            let bb = o.bounding_rect();
            if !bb.is_valid() || !self.bounds.contains_rect(&bb) {
                return Err(SimError::InvalidEnvironment(format!(
                    "obstacle {i} is degenerate or outside the bounds"
                )));
            }
        }
        self.action_limits.validate()
    }

    /// Robot disc centred at `(x, y)` hits an obstacle or leaves the bounds.
    pub fn collides(&self, x: f64, y: f64) -> bool {
        let r = self.robot_radius;
        let b = &self.bounds;
        if x - r < b.min_x || x + r > b.max_x || y - r < b.min_y || y + r > b.max_y {
            return true;
        }
        self.obstacles.iter().any(|o| o.overlaps_disc(x, y, r))
    }
}

/// Timing, noise and actuation parameters of one simulator tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidelityConfig {
    pub dt_physics: f64,
    pub policy_period: f64,
    #[serde(default)]
    pub actuation_latency: f64,
    #[serde(default)]
    pub position_noise_sigma: f64,
    #[serde(default)]
    pub heading_noise_sigma: f64,
    #[serde(default)]
    pub velocity_noise_sigma: f64,
    #[serde(default)]
    pub actuator_time_constant: f64,
    #[serde(default)]
    pub seed: u64,
}

impl FidelityConfig {
    /// Perfect observations, synchronous stepping, `dt = 0.05 s`.
    pub fn low_fidelity() -> Self {
        Self {
            dt_physics: 0.05,
            policy_period: 0.05,
            actuation_latency: 0.0,
            position_noise_sigma: 0.0,
            heading_noise_sigma: 0.0,
            velocity_noise_sigma: 0.0,
            actuator_time_constant: 0.0,
            seed: 0,
        }
    }

    /// Default software-in-the-loop tier: 10 Hz decisions, one physics step of
    /// latency, modest odometry noise and a 0.2 s actuator lag.
    pub fn high_fidelity() -> Self {
        Self {
            dt_physics: 0.05,
            policy_period: 0.1,
            actuation_latency: 0.05,
            position_noise_sigma: 0.05,
            heading_noise_sigma: 0.02,
            velocity_noise_sigma: 0.05,
            actuator_time_constant: 0.2,
            seed: 0,
        }
    }

    fn ticks(&self, span: f64, what: &str) -> Result<u64, SimError> {
        let ratio = span / self.dt_physics;
        let n = ratio.round();
        if !ratio.is_finite() || n < 0.0 || (ratio - n).abs() > 1e-6 {
            return Err(SimError::InvalidConfig(format!(
                "{what} ({span}) must be a non-negative integer multiple of dt_physics"
            )));
        }
        Ok(n as u64)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt_physics.is_finite() && self.dt_physics > 0.0) {
            return Err(SimError::InvalidConfig("dt_physics must be positive".into()));
        }
        if self.policy_ticks()? == 0 {
            return Err(SimError::InvalidConfig("policy_period must be >= dt_physics".into()));
        }
        self.latency_ticks()?;
        let sigmas = [
            self.position_noise_sigma,
            self.heading_noise_sigma,
            self.velocity_noise_sigma,
            self.actuator_time_constant,
        ];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(SimError::InvalidConfig(
                "noise sigmas and actuator time constant must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn policy_ticks(&self) -> Result<u64, SimError> {
        self.ticks(self.policy_period, "policy_period")
    }

    pub fn latency_ticks(&self) -> Result<u64, SimError> {
        self.ticks(self.actuation_latency, "actuation_latency")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub state: RobotState,
    pub collided: bool,
    /// The command was outside the action limits and got clamped.
    pub clamped: bool,
}

/// One physics step: actuator lag, then an Euler unicycle update.
///
/// The lag gain `dt / tau` is capped at 1 so the velocity never overshoots
/// the command. On collision the pre-step pose is returned with zero
/// velocities.
pub fn step(state: &RobotState, action: Action, env: &EnvironmentMap, cfg: &FidelityConfig) -> StepResult {
    let (cmd, clamped) = env.action_limits.clamp(action);
    if clamped {
        log::debug!("clamped action {action:?} to {cmd:?}");
    }
    let dt = cfg.dt_physics;
    let tau = cfg.actuator_time_constant;
    let (v, w) = if tau > 0.0 {
        let gain = (dt / tau).min(1.0);
        (
            state.linear_velocity + gain * (cmd.v_cmd - state.linear_velocity),
            state.angular_velocity + gain * (cmd.w_cmd - state.angular_velocity),
        )
    } else {
        (cmd.v_cmd, cmd.w_cmd)
    };
    let next = RobotState {
        x: state.x + v * state.heading.cos() * dt,
        y: state.y + v * state.heading.sin() * dt,
        heading: wrap_angle(state.heading + w * dt),
        linear_velocity: v,
        angular_velocity: w,
    };
    if env.collides(next.x, next.y) {
        StepResult {
            state: RobotState {
                linear_velocity: 0.0,
                angular_velocity: 0.0,
                ..*state
            },
            collided: true,
            clamped,
        }
    } else {
        StepResult {
            state: next,
            collided: false,
            clamped,
        }
    }
}

fn noisy(value: f64, sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    if sigma > 0.0 {
        let z: f64 = StandardNormal.sample(rng);
        value + sigma * z
    } else {
        value
    }
}

/// Goal-relative observation of `state`, with per-field Gaussian noise when
/// the config has non-zero sigmas. Position noise is applied in the world
/// frame before the transformation.
pub fn observe(state: &RobotState, goal: &PoseRegion, cfg: &FidelityConfig, rng: &mut ChaCha8Rng) -> Observation {
    let x = noisy(state.x, cfg.position_noise_sigma, rng);
    let y = noisy(state.y, cfg.position_noise_sigma, rng);
    let heading = noisy(state.heading, cfg.heading_noise_sigma, rng);
    let v = noisy(state.linear_velocity, cfg.velocity_noise_sigma, rng);
    let w = noisy(state.angular_velocity, cfg.velocity_noise_sigma, rng);

    let dx = goal.center_x - x;
    let dy = goal.center_y - y;
    let (s, c) = goal.heading.sin_cos();
    Observation {
        goal_dx: c * dx + s * dy,
        goal_dy: -s * dx + c * dy,
        relative_heading: wrap_angle(heading - goal.heading),
        bearing_to_goal: wrap_angle(dy.atan2(dx) - heading),
        linear_velocity: v,
        angular_velocity: w,
    }
}

/// Uniform over the entry disc (by area) crossed with the heading arc, at rest.
pub fn sample_entry_state(subtask: &Subtask, rng: &mut impl Rng) -> RobotState {
    let e = &subtask.entry;
    let r = e.position_radius * rng.random::<f64>().sqrt();
    let phi = 2.0 * PI * rng.random::<f64>();
    let dh = e.heading_tolerance * (2.0 * rng.random::<f64>() - 1.0);
    RobotState::at_rest(Pose::new(
        e.center_x + r * phi.cos(),
        e.center_y + r * phi.sin(),
        e.heading + dh,
    ))
}

/// Anything that maps observations to velocity commands.
pub trait Controller {
    fn act(&self, obs: &Observation) -> Action;

    /// Whether this controller gives up for the whole episode keyed by
    /// `episode_seed`. Used for failure injection; defaults to never.
    fn stalls(&self, _episode_seed: u64) -> bool {
        false
    }
}

impl<F: Fn(&Observation) -> Action> Controller for F {
    fn act(&self, obs: &Observation) -> Action {
        self(obs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeOutcome {
    Success,
    Collision,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    Done(EpisodeOutcome),
}

/// One row of an exported trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub time_s: f64,
    pub x_m: f64,
    pub y_m: f64,
    pub heading_rad: f64,
    pub v_mps: f64,
    pub w_radps: f64,
    pub active_subtask_id: SubtaskId,
    pub position_error_m: f64,
    pub heading_error_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub subtask_id: SubtaskId,
    pub outcome: EpisodeOutcome,
    pub physics_steps: u64,
    pub decisions: u64,
    pub clamp_events: u64,
    pub final_state: RobotState,
    pub samples: Vec<TrajectorySample>,
}

/// Step-by-step episode on simulated time.
///
/// Each tick: if a decision is due the caller observes and submits an
/// action, which becomes active `latency` ticks later (the previous action is
/// held until then); then physics advances one `dt`.
pub struct Episode<'a> {
    subtask: &'a Subtask,
    env: &'a EnvironmentMap,
    cfg: &'a FidelityConfig,
    rng: ChaCha8Rng,
    state: RobotState,
    prev: RobotState,
    tick: u64,
    max_ticks: u64,
    policy_ticks: u64,
    latency_ticks: u64,
    pending: VecDeque<(u64, Action)>,
    applied: Action,
    decisions: u64,
    clamp_events: u64,
    outcome: Option<EpisodeOutcome>,
    time_offset: f64,
    samples: Option<Vec<TrajectorySample>>,
}

impl<'a> Episode<'a> {
    pub fn new(
        subtask: &'a Subtask,
        start: RobotState,
        env: &'a EnvironmentMap,
        cfg: &'a FidelityConfig,
        seed: u64,
        record: bool,
    ) -> Result<Self, SimError> {
        cfg.validate()?;
        if !subtask.entry.contains_pose(&start.pose()) {
            return Err(SimError::StartOutsideEntry(subtask.id.clone()));
        }
        let max_ticks = (subtask.timeout / cfg.dt_physics + 1e-9).floor() as u64;
        let mut ep = Self {
            subtask,
            env,
            cfg,
            rng: rng_for(cfg.seed, "episode", seed),
            state: start,
            prev: start,
            tick: 0,
            max_ticks,
            policy_ticks: cfg.policy_ticks()?,
            latency_ticks: cfg.latency_ticks()?,
            pending: VecDeque::new(),
            applied: Action::STOP,
            decisions: 0,
            clamp_events: 0,
            outcome: None,
            time_offset: 0.0,
            samples: record.then(Vec::new),
        };
        if subtask.exit.contains_pose(&start.pose()) {
            ep.outcome = Some(EpisodeOutcome::Success);
        }
        ep.push_sample();
        Ok(ep)
    }

    /// Shifts recorded timestamps, for concatenating subtask rollouts.
    pub fn with_time_offset(mut self, offset: f64) -> Self {
        self.time_offset = offset;
        if let Some(s) = self.samples.as_mut() {
            for row in s.iter_mut() {
                row.time_s += offset;
            }
        }
        self
    }

    fn push_sample(&mut self) {
        let Some(samples) = self.samples.as_mut() else { return };
        let exit = &self.subtask.exit;
        let s = &self.state;
        samples.push(TrajectorySample {
            time_s: self.time_offset + self.tick as f64 * self.cfg.dt_physics,
            x_m: s.x,
            y_m: s.y,
            heading_rad: s.heading,
            v_mps: s.linear_velocity,
            w_radps: s.angular_velocity,
            active_subtask_id: self.subtask.id.clone(),
            position_error_m: exit.distance_to(s.x, s.y),
            heading_error_rad: wrap_angle(s.heading - exit.heading),
        });
    }

    pub fn outcome(&self) -> Option<EpisodeOutcome> {
        self.outcome
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn previous_state(&self) -> &RobotState {
        &self.prev
    }

    pub fn elapsed(&self) -> f64 {
        self.tick as f64 * self.cfg.dt_physics
    }

    pub fn decision_due(&self) -> bool {
        self.outcome.is_none() && self.tick.is_multiple_of(self.policy_ticks)
    }

    pub fn observe(&mut self) -> Observation {
        observe(&self.state, &self.subtask.exit, self.cfg, &mut self.rng)
    }

    pub fn submit(&mut self, action: Action) {
        self.decisions += 1;
        self.pending.push_back((self.tick + self.latency_ticks, action));
    }

    /// Advances one physics tick.
    pub fn advance(&mut self) -> StepOutcome {
        if let Some(o) = self.outcome {
            return StepOutcome::Done(o);
        }
        while let Some(&(due, a)) = self.pending.front() {
            if due > self.tick {
                break;
            }
            self.applied = a;
            self.pending.pop_front();
        }
        let res = step(&self.state, self.applied, self.env, self.cfg);
        if res.clamped {
            self.clamp_events += 1;
        }
        self.prev = self.state;
        self.state = res.state;
        self.tick += 1;
        self.push_sample();

        self.outcome = if res.collided {
            Some(EpisodeOutcome::Collision)
        } else if self.subtask.exit.contains_pose(&self.state.pose()) {
            Some(EpisodeOutcome::Success)
        } else if self.tick >= self.max_ticks {
            Some(EpisodeOutcome::Timeout)
        } else {
            None
        };
        match self.outcome {
            Some(o) => StepOutcome::Done(o),
            None => StepOutcome::Continue,
        }
    }

    pub fn finish(self) -> RolloutRecord {
        RolloutRecord {
            subtask_id: self.subtask.id.clone(),
            outcome: self.outcome.unwrap_or(EpisodeOutcome::Timeout),
            physics_steps: self.tick,
            decisions: self.decisions,
            clamp_events: self.clamp_events,
            final_state: self.state,
            samples: self.samples.unwrap_or_default(),
        }
    }
}

/// Runs `policy` on `subtask` from `start` until success, collision or timeout.
pub fn run_episode(
    policy: &dyn Controller,
    subtask: &Subtask,
    start: RobotState,
    env: &EnvironmentMap,
    cfg: &FidelityConfig,
    seed: u64,
) -> Result<RolloutRecord, SimError> {
    let ep = Episode::new(subtask, start, env, cfg, seed, true)?;
    Ok(drive(ep, policy, seed))
}

/// Same as [`run_episode`] without trajectory recording.
pub fn run_episode_outcome(
    policy: &dyn Controller,
    subtask: &Subtask,
    start: RobotState,
    env: &EnvironmentMap,
    cfg: &FidelityConfig,
    seed: u64,
) -> Result<EpisodeOutcome, SimError> {
    let ep = Episode::new(subtask, start, env, cfg, seed, false)?;
    Ok(drive(ep, policy, seed).outcome)
}

pub(crate) fn drive(mut ep: Episode<'_>, policy: &dyn Controller, seed: u64) -> RolloutRecord {
    let stalled = policy.stalls(seed);
    loop {
        if ep.decision_due() {
            let obs = ep.observe();
            let a = if stalled { Action::STOP } else { policy.act(&obs) };
            ep.submit(a);
        }
        if let StepOutcome::Done(_) = ep.advance() {
            return ep.finish();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn open_env() -> EnvironmentMap {
        EnvironmentMap::open(
            Rect {
                min_x: -50.0,
                min_y: -50.0,
                max_x: 50.0,
                max_y: 50.0,
            },
            0.3,
        )
    }

    fn rest(x: f64, y: f64, h: f64) -> RobotState {
        RobotState::at_rest(Pose::new(x, y, h))
    }

    fn straight_subtask() -> Subtask {
        Subtask {
            id: "c0".into(),
            entry: PoseRegion::new(0.0, 0.0, 3.0, 0.0, 0.5),
            exit: PoseRegion::new(10.0, 0.0, 1.0, 0.0, 0.4),
            timeout: 30.0,
        }
    }

    fn low() -> FidelityConfig {
        FidelityConfig {
            dt_physics: 0.1,
            policy_period: 0.1,
            ..FidelityConfig::low_fidelity()
        }
    }

    #[test]
    fn step_examples() {
        let env = open_env();
        let cfg = low();
        let s = rest(0.0, 0.0, 0.0);
        assert_eq!(step(&s, Action::STOP, &env, &cfg).state, s);
        let r = step(&s, Action::new(1.0, 0.0), &env, &cfg);
        assert!((r.state.x - 0.1).abs() < 1e-15);
        assert_eq!(r.state.y, 0.0);
        assert_eq!(r.state.heading, 0.0);
        let r = step(&s, Action::new(0.0, 1.0), &env, &cfg);
        assert!((r.state.heading - 0.1).abs() < 1e-15);
    }

    #[test]
    fn lag_and_clamp() {
        let env = open_env();
        let cfg = FidelityConfig {
            actuator_time_constant: 0.2,
            ..low()
        };
        let r = step(&rest(0.0, 0.0, 0.0), Action::new(5.0, -3.0), &env, &cfg);
        assert!(r.clamped);
        assert!((r.state.linear_velocity - 1.0).abs() < 1e-12);
        assert!((r.state.angular_velocity + 0.5).abs() < 1e-12);
    }

    #[test]
    fn collision_halts_robot() {
        let mut env = open_env();
        env.obstacles.push(Obstacle::Circle {
            x: 1.0,
            y: 0.0,
            radius: 0.5,
        });
        let s = RobotState {
            linear_velocity: 2.0,
            ..rest(0.15, 0.0, 0.0)
        };
        let r = step(&s, Action::new(2.0, 0.0), &env, &low());
        assert!(r.collided);
        assert_eq!(r.state.x, 0.15);
        assert_eq!(r.state.linear_velocity, 0.0);
        assert!(env.collides(49.8, 0.0));
    }

    #[test]
    fn observe_examples() {
        let cfg = FidelityConfig::low_fidelity();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let goal = PoseRegion::new(2.0, 3.0, 1.0, 0.7, 0.4);
        let o = observe(&rest(2.0, 3.0, 0.7), &goal, &cfg, &mut rng);
        assert_eq!((o.goal_dx, o.goal_dy, o.relative_heading), (0.0, 0.0, 0.0));

        let goal = PoseRegion::new(0.0, 0.0, 1.0, 0.0, 0.4);
        let o = observe(&rest(5.0, 0.0, 0.0), &goal, &cfg, &mut rng);
        assert_eq!(o.goal_dx, -5.0);
        assert_eq!(o.goal_dy, 0.0);
        assert_eq!(o.bearing_to_goal, PI);
    }

    #[test]
    fn zero_sigma_high_fidelity_matches_low() {
        let goal = PoseRegion::new(4.0, -1.0, 1.0, 0.3, 0.4);
        let s = RobotState {
            linear_velocity: 0.7,
            angular_velocity: -0.2,
            ..rest(1.0, 2.0, -2.0)
        };
        let hi = FidelityConfig {
            position_noise_sigma: 0.0,
            heading_noise_sigma: 0.0,
            velocity_noise_sigma: 0.0,
            ..FidelityConfig::high_fidelity()
        };
        let a = observe(
            &s,
            &goal,
            &FidelityConfig::low_fidelity(),
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let b = observe(&s, &goal, &hi, &mut ChaCha8Rng::seed_from_u64(99));
        assert_eq!(a, b);
    }

    #[test]
    fn straight_drive_succeeds() {
        let st = straight_subtask();
        let full = |_: &Observation| Action::new(2.0, 0.0);
        let rec = run_episode(&full, &st, rest(0.0, 0.0, 0.0), &open_env(), &low(), 1).unwrap();
        assert_eq!(rec.outcome, EpisodeOutcome::Success);
        // x reaches 9.0 after 45 steps of 0.2 m.
        assert_eq!(rec.physics_steps, 45);
    }

    #[test]
    fn idle_policy_times_out() {
        let st = straight_subtask();
        let idle = |_: &Observation| Action::STOP;
        let rec = run_episode(&idle, &st, rest(0.0, 0.0, 0.0), &open_env(), &low(), 1).unwrap();
        assert_eq!(rec.outcome, EpisodeOutcome::Timeout);
        assert_eq!(rec.physics_steps, 300);
    }

    #[test]
    fn start_outside_entry_rejected() {
        let st = straight_subtask();
        let idle = |_: &Observation| Action::STOP;
        let err = run_episode(&idle, &st, rest(5.0, 0.0, 0.0), &open_env(), &low(), 1).unwrap_err();
        assert_eq!(err, SimError::StartOutsideEntry("c0".into()));
    }

    #[test]
    fn latency_delays_first_command() {
        let st = straight_subtask();
        let cfg = FidelityConfig {
            actuation_latency: 0.2,
            ..low()
        };
        let go = |_: &Observation| Action::new(1.0, 0.0);
        let rec = run_episode(&go, &st, rest(0.0, 0.0, 0.0), &open_env(), &cfg, 3).unwrap();
        let xs: Vec<f64> = rec.samples.iter().take(4).map(|s| s.x_m).collect();
        assert_eq!(xs[1], 0.0);
        assert_eq!(xs[2], 0.0);
        assert!((xs[3] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn policy_period_holds_action() {
        let st = straight_subtask();
        let cfg = FidelityConfig {
            policy_period: 0.3,
            ..low()
        };
        let go = |o: &Observation| Action::new(1.0, if o.goal_dx > 9.95 { 0.0 } else { 0.5 });
        let rec = run_episode(&go, &st, rest(0.0, 0.0, 0.0), &open_env(), &cfg, 3).unwrap();
        assert_eq!(rec.decisions, rec.physics_steps.div_ceil(3));
    }

    #[test]
    fn entry_samples_stay_inside() {
        let st = straight_subtask();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let s = sample_entry_state(&st, &mut rng);
            assert!(st.entry.distance_to(s.x, s.y) <= 3.0);
            assert!(wrap_angle(s.heading).abs() <= 0.5);
            assert_eq!(s.linear_velocity, 0.0);
        }
    }

    #[test]
    fn degenerate_entry_is_exact_pose() {
        let mut st = straight_subtask();
        st.entry = PoseRegion::new(1.5, -2.0, 1e-300, 0.25, 1e-300);
        let s = sample_entry_state(&st, &mut ChaCha8Rng::seed_from_u64(0));
        assert!((s.x - 1.5).abs() < 1e-12 && (s.y + 2.0).abs() < 1e-12);
        assert!((s.heading - 0.25).abs() < 1e-12);
    }

    #[test]
    fn entry_sample_mean_is_centered() {
        let mut st = straight_subtask();
        st.entry = PoseRegion::new(4.0, -7.0, 3.0, 0.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let s = sample_entry_state(&st, &mut rng);
            sx += s.x;
            sy += s.y;
        }
        // Per-axis variance of an area-uniform disc is R^2 / 4.
        let sigma = (9.0f64 / 4.0 / n as f64).sqrt();
        assert!((sx / n as f64 - 4.0).abs() < 3.0 * sigma);
        assert!((sy / n as f64 + 7.0).abs() < 3.0 * sigma);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = low();
        cfg.policy_period = 0.15;
        assert!(cfg.validate().is_err());
        cfg.policy_period = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = low();
        cfg.actuation_latency = 0.05;
        assert!(cfg.validate().is_err());
        let mut cfg = low();
        cfg.position_noise_sigma = -1.0;
        assert!(cfg.validate().is_err());
    }
}
