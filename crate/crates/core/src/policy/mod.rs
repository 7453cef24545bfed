//! Subtask policies: the handle type, reward signal, learners, and the
//! on-disk parameter format.

pub mod codec;
pub mod reward;
pub mod scripted;
pub mod tile;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hlm::Subtask;
use crate::seed::{derive_seed, rng_for};
use crate::sim::{
    run_episode_outcome, sample_entry_state, Action, Controller, EnvironmentMap, Episode, EpisodeOutcome,
    FidelityConfig, Observation, SimError, StepOutcome,
};

pub use reward::{reward, RewardWeights, StepKind};
pub use scripted::GoToPose;
pub use tile::{TileQConfig, TileQPolicy};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("initial policy is a `{found}` policy but the learner produces `{expected}`")]
    LearnerMismatch { expected: LearnerKind, found: LearnerKind },
    #[error("invalid training input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Constant,
    GoToPose,
    TileQ,
    FaultInjected,
}

impl LearnerKind {
    pub fn tag(self) -> u8 {
        match self {
            LearnerKind::Constant => 1,
            LearnerKind::GoToPose => 2,
            LearnerKind::TileQ => 3,
            LearnerKind::FaultInjected => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => LearnerKind::Constant,
            2 => LearnerKind::GoToPose,
            3 => LearnerKind::TileQ,
            4 => LearnerKind::FaultInjected,
            _ => return None,
        })
    }
}

impl std::fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LearnerKind::Constant => "constant",
            LearnerKind::GoToPose => "go_to_pose",
            LearnerKind::TileQ => "tile_q",
            LearnerKind::FaultInjected => "fault_injected",
        };
        f.write_str(s)
    }
}

/// A subtask policy. Evaluation is deterministic: `act` is a pure function
/// of the parameters and the observation.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyHandle {
    Constant(Action),
    GoToPose(GoToPose),
    TileQ(TileQPolicy),
    /// Wraps another policy and, per episode, gives up with the given
    /// probability (commands zero velocity for the whole episode).
    FaultInjected {
        inner: Box<PolicyHandle>,
        failure_probability: f64,
    },
}

impl PolicyHandle {
    pub fn kind(&self) -> LearnerKind {
        match self {
            PolicyHandle::Constant(_) => LearnerKind::Constant,
            PolicyHandle::GoToPose(_) => LearnerKind::GoToPose,
            PolicyHandle::TileQ(_) => LearnerKind::TileQ,
            PolicyHandle::FaultInjected { .. } => LearnerKind::FaultInjected,
        }
    }

    pub fn with_failure_probability(self, failure_probability: f64) -> Self {
        PolicyHandle::FaultInjected {
            inner: Box::new(self),
            failure_probability,
        }
    }

    pub fn act(&self, obs: &Observation) -> Action {
        match self {
            PolicyHandle::Constant(a) => *a,
            PolicyHandle::GoToPose(c) => c.act(obs),
            PolicyHandle::TileQ(p) => p.act(obs),
            PolicyHandle::FaultInjected { inner, .. } => inner.act(obs),
        }
    }
}

impl Controller for PolicyHandle {
    fn act(&self, obs: &Observation) -> Action {
        PolicyHandle::act(self, obs)
    }

    fn stalls(&self, episode_seed: u64) -> bool {
        match self {
            PolicyHandle::FaultInjected {
                inner,
                failure_probability,
            } => {
                let u = (derive_seed(episode_seed, "fault", 0) >> 11) as f64 / (1u64 << 53) as f64;
                u < *failure_probability || inner.stalls(episode_seed)
            }
            _ => false,
        }
    }
}

/// Which learner produces subtask policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerSpec {
    TileQ(TileQConfig),
    GoToPose(GoToPose),
}

impl Default for LearnerSpec {
    fn default() -> Self {
        LearnerSpec::TileQ(TileQConfig::default())
    }
}

impl LearnerSpec {
    pub fn kind(&self) -> LearnerKind {
        match self {
            LearnerSpec::TileQ(_) => LearnerKind::TileQ,
            LearnerSpec::GoToPose(_) => LearnerKind::GoToPose,
        }
    }

    /// Untrained policy for `subtask`. Action limits always come from the
    /// environment.
    pub fn fresh(&self, subtask: &Subtask, env: &EnvironmentMap) -> PolicyHandle {
        match self {
            LearnerSpec::TileQ(cfg) => PolicyHandle::TileQ(cfg.fresh_policy(subtask, &env.action_limits)),
            LearnerSpec::GoToPose(g) => PolicyHandle::GoToPose(GoToPose {
                limits: env.action_limits,
                ..*g
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBudget {
    pub max_steps: u64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    #[serde(default)]
    pub seed: u64,
}

fn default_eval_interval() -> u64 {
    10_000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub steps: u64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub policy: PolicyHandle,
    pub steps: u64,
    /// Every evaluation, in order.
    pub checkpoints: Vec<Checkpoint>,
    /// Evaluations that replaced the best snapshot, in order.
    pub best_sequence: Vec<Checkpoint>,
}

/// Greedy success rate over `n` episodes from entry states keyed by `seed`.
pub fn evaluate_success_rate(
    policy: &dyn Controller,
    subtask: &Subtask,
    env: &EnvironmentMap,
    cfg: &FidelityConfig,
    n: u32,
    seed: u64,
) -> Result<f64, SimError> {
    if n == 0 {
        return Ok(0.0);
    }
    let mut rng = rng_for(seed, "eval-starts", 0);
    let mut ok = 0u32;
    for i in 0..n {
        let start = sample_entry_state(subtask, &mut rng);
        let out = run_episode_outcome(policy, subtask, start, env, cfg, derive_seed(seed, "eval", i as u64))?;
        if out == EpisodeOutcome::Success {
            ok += 1;
        }
    }
    Ok(ok as f64 / n as f64)
}

/// Trains a policy for `subtask`, keeping the snapshot with the best greedy
/// evaluation. Scripted learners return their controller without training.
pub fn train_subtask_policy(
    learner: &LearnerSpec,
    subtask: &Subtask,
    env: &EnvironmentMap,
    cfg: &FidelityConfig,
    weights: &RewardWeights,
    budget: &TrainBudget,
    initial: Option<&PolicyHandle>,
) -> Result<TrainReport, PolicyError> {
    subtask
        .validate()
        .map_err(|e| PolicyError::InvalidInput(e.to_string()))?;
    env.validate()?;
    cfg.validate()?;
    if !weights.is_valid() {
        return Err(PolicyError::InvalidInput("reward weights out of range".into()));
    }
    if let Some(p) = initial {
        if p.kind() != learner.kind() {
            return Err(PolicyError::LearnerMismatch {
                expected: learner.kind(),
                found: p.kind(),
            });
        }
    }
    let start = initial.cloned().unwrap_or_else(|| learner.fresh(subtask, env));
    let unchanged = TrainReport {
        policy: start.clone(),
        steps: 0,
        checkpoints: Vec::new(),
        best_sequence: Vec::new(),
    };
    if budget.max_steps == 0 {
        return Ok(unchanged);
    }
    match (learner, start) {
        (LearnerSpec::TileQ(tcfg), PolicyHandle::TileQ(p)) => {
            if !p.is_consistent() {
                return Err(PolicyError::InvalidInput("inconsistent tile-coded policy".into()));
            }
            train_tile_q(tcfg, p, subtask, env, cfg, weights, budget)
        }
        _ => Ok(unchanged),
    }
}

fn train_tile_q(
    tcfg: &TileQConfig,
    policy: TileQPolicy,
    subtask: &Subtask,
    env: &EnvironmentMap,
    cfg: &FidelityConfig,
    weights: &RewardWeights,
    budget: &TrainBudget,
) -> Result<TrainReport, PolicyError> {
    let eval_seed = derive_seed(budget.seed, "checkpoint-eval", 0);
    let evaluate = |p: &TileQPolicy| {
        let handle = PolicyHandle::TileQ(p.clone());
        evaluate_success_rate(&handle, subtask, env, cfg, tcfg.eval_episodes, eval_seed)
    };
    let interval = if budget.eval_interval == 0 {
        budget.max_steps
    } else {
        budget.eval_interval
    };

    let first = Checkpoint {
        steps: 0,
        success_rate: evaluate(&policy)?,
    };
    let mut best = (first, policy.clone());
    let mut checkpoints = vec![first];
    let mut best_sequence = vec![first];
    if first.success_rate >= 1.0 {
        return Ok(TrainReport {
            policy: PolicyHandle::TileQ(policy),
            steps: 0,
            checkpoints,
            best_sequence,
        });
    }

    let repeat = tcfg.action_repeat.max(1);
    let mut learner = tile::SarsaLambda::new(tcfg, policy);
    let mut rng = rng_for(budget.seed, "train", 0);
    let mut steps = 0u64;
    let mut episode = 0u64;
    let mut last_eval = 0u64;
    let epsilon_at = |steps: u64| {
        let frac = (steps as f64 / budget.max_steps as f64).min(1.0);
        tcfg.epsilon_start + frac * (tcfg.epsilon_end - tcfg.epsilon_start)
    };

    'outer: while steps < budget.max_steps {
        let start = sample_entry_state(subtask, &mut rng);
        let mut ep = Episode::new(
            subtask,
            start,
            env,
            cfg,
            derive_seed(budget.seed, "train-episode", episode),
            false,
        )?;
        episode += 1;
        learner.begin_episode();
        if ep.outcome().is_some() {
            steps += 1;
            continue;
        }
        let obs = ep.observe();
        let (mut tiles, mut a) = learner.choose(&obs, epsilon_at(steps), &mut rng);
        loop {
            let action = learner.policy.actions[a];
            ep.submit(action);
            let mut held = 1;
            let mut r = 0.0;
            let done = loop {
                let outcome = ep.advance();
                let kind = match outcome {
                    StepOutcome::Done(EpisodeOutcome::Success) => StepKind::Success,
                    StepOutcome::Done(EpisodeOutcome::Collision) => StepKind::Collision,
                    _ => StepKind::Continue,
                };
                r += reward(ep.previous_state(), ep.state(), kind, subtask, weights);
                match outcome {
                    StepOutcome::Done(o) => break Some(o),
                    StepOutcome::Continue if ep.decision_due() => {
                        if held >= repeat {
                            break None;
                        }
                        ep.submit(action);
                        held += 1;
                    }
                    StepOutcome::Continue => {}
                }
            };
            steps += 1;
            match done {
                Some(EpisodeOutcome::Success | EpisodeOutcome::Collision) => {
                    learner.update(&tiles, a, r, None);
                }
                Some(EpisodeOutcome::Timeout) => {
                    let obs = ep.observe();
                    let (nt, na) = learner.choose(&obs, 0.0, &mut rng);
                    learner.update(&tiles, a, r, Some((&nt, na)));
                }
                None => {
                    let obs = ep.observe();
                    let (nt, na) = learner.choose(&obs, epsilon_at(steps), &mut rng);
                    learner.update(&tiles, a, r, Some((&nt, na)));
                    tiles = nt;
                    a = na;
                }
            }

            if steps.is_multiple_of(interval) || steps >= budget.max_steps {
                last_eval = steps;
                let cp = Checkpoint {
                    steps,
                    success_rate: evaluate(&learner.policy)?,
                };
                checkpoints.push(cp);
                if cp.success_rate >= best.0.success_rate {
                    best = (cp, learner.policy.clone());
                    best_sequence.push(cp);
                }
                log::debug!(
                    "subtask {} step {steps}: eval success {:.3}",
                    subtask.id,
                    cp.success_rate
                );
                if cp.success_rate >= 1.0 || steps >= budget.max_steps {
                    break 'outer;
                }
            }
            if done.is_some() {
                break;
            }
        }
    }
    debug_assert!(last_eval == steps || steps >= budget.max_steps);

    Ok(TrainReport {
        policy: PolicyHandle::TileQ(best.1),
        steps,
        checkpoints,
        best_sequence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, PoseRegion};
    use crate::sim::{ActionLimits, Rect, RobotState};

    fn st() -> Subtask {
        Subtask {
            id: "c0".into(),
            entry: PoseRegion::new(0.0, 0.0, 3.0, 0.0, 0.5),
            exit: PoseRegion::new(10.0, 0.0, 1.0, 0.0, 0.4),
            timeout: 20.0,
        }
    }

    fn env() -> EnvironmentMap {
        EnvironmentMap::open(
            Rect {
                min_x: -20.0,
                min_y: -20.0,
                max_x: 30.0,
                max_y: 20.0,
            },
            0.3,
        )
    }

    #[test]
    fn zero_budget_returns_initial() {
        let spec = LearnerSpec::default();
        let init = spec.fresh(&st(), &env());
        let budget = TrainBudget {
            max_steps: 0,
            eval_interval: 100,
            seed: 1,
        };
        let out = train_subtask_policy(
            &spec,
            &st(),
            &env(),
            &FidelityConfig::low_fidelity(),
            &RewardWeights::default(),
            &budget,
            Some(&init),
        )
        .unwrap();
        assert_eq!(out.policy, init);
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn mismatched_initial_rejected() {
        let spec = LearnerSpec::default();
        let init = PolicyHandle::Constant(Action::STOP);
        let budget = TrainBudget {
            max_steps: 10,
            eval_interval: 5,
            seed: 1,
        };
        let err = train_subtask_policy(
            &spec,
            &st(),
            &env(),
            &FidelityConfig::low_fidelity(),
            &RewardWeights::default(),
            &budget,
            Some(&init),
        )
        .unwrap_err();
        assert!(matches!(err, PolicyError::LearnerMismatch { .. }));
    }

    #[test]
    fn training_is_deterministic() {
        let spec = LearnerSpec::TileQ(TileQConfig {
            eval_episodes: 5,
            ..TileQConfig::default()
        });
        let budget = TrainBudget {
            max_steps: 3_000,
            eval_interval: 1_000,
            seed: 42,
        };
        let run = || {
            train_subtask_policy(
                &spec,
                &st(),
                &env(),
                &FidelityConfig::low_fidelity(),
                &RewardWeights::default(),
                &budget,
                None,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        for w in a.best_sequence.windows(2) {
            assert!(w[1].success_rate >= w[0].success_rate);
        }
    }

    #[test]
    fn untrained_policy_acts_in_bounds() {
        let p = LearnerSpec::default().fresh(&st(), &env());
        let obs = Observation {
            goal_dx: 3.0,
            goal_dy: -1.0,
            relative_heading: 0.2,
            bearing_to_goal: -0.3,
            linear_velocity: 0.0,
            angular_velocity: 0.0,
        };
        let a = p.act(&obs);
        assert!(ActionLimits::default().contains(&a));
        assert_eq!(a, p.act(&obs));
    }

    #[test]
    fn go_to_pose_reaches_straight_goal() {
        let p = LearnerSpec::GoToPose(GoToPose::default()).fresh(&st(), &env());
        let rate = evaluate_success_rate(&p, &st(), &env(), &FidelityConfig::low_fidelity(), 100, 3).unwrap();
        assert_eq!(rate, 1.0);
    }

    #[test]
    fn fault_injection_rate() {
        let p = PolicyHandle::Constant(Action::STOP).with_failure_probability(0.3);
        let n = 20_000;
        let stalls = (0..n).filter(|i| p.stalls(*i)).count() as f64 / n as f64;
        assert!((stalls - 0.3).abs() < 0.015);
        let _ = RobotState::at_rest(Pose::new(0.0, 0.0, 0.0));
    }
}
