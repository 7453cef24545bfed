//! Monte-Carlo verification of subtask policies and of full compositions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::inv_beta_reg;
use thiserror::Error;

use crate::hlm::{reach_probability, Hlm, HlmError, MetaPolicy, ParamVector, StateId, Subtask, SubtaskId, TaskSpec};
use crate::policy::PolicyHandle;
use crate::seed::{derive_seed, rng_for};
use crate::sim::{
    drive, sample_entry_state, EnvironmentMap, Episode, EpisodeOutcome, FidelityConfig, RobotState, SimError,
    TrajectorySample,
};

pub const DEFAULT_TRIALS: u32 = 100;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum VerifyError {
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("{successes} successes out of {trials} trials is not a valid count")]
    InvalidCount { successes: u64, trials: u64 },
    #[error("no policy for subtask `{0}`")]
    MissingPolicy(SubtaskId),
    #[error("subtask `{0}` is not defined")]
    UnknownSubtask(SubtaskId),
    #[error("meta-policy has no choice for state `{0}`")]
    UnmappedState(StateId),
    #[error("no successor recorded for subtask `{0}`")]
    MissingSuccessor(SubtaskId),
    #[error(transparent)]
    Hlm(#[from] HlmError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalEstimate {
    pub subtask_id: SubtaskId,
    pub successes: u64,
    pub trials: u64,
    pub p_hat: f64,
    pub lower_bound: f64,
    pub alpha: f64,
}

/// One-sided Clopper-Pearson lower bound on a binomial success probability.
pub fn lower_confidence_bound(successes: u64, trials: u64, alpha: f64) -> Result<f64, VerifyError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(VerifyError::InvalidAlpha(alpha));
    }
    if trials == 0 || successes > trials {
        return Err(VerifyError::InvalidCount { successes, trials });
    }
    if successes == 0 {
        return Ok(0.0);
    }
    if successes == trials {
        return Ok(alpha.powf(1.0 / trials as f64));
    }
    let k = successes as f64;
    let n = trials as f64;
    Ok(inv_beta_reg(k, n - k + 1.0, alpha))
}

/// Rolls `policy` out `n_trials` times from uniformly sampled entry states.
/// Trial `i` uses its own seed stream, so the result does not depend on
/// scheduling.
pub fn estimate_success_probability(
    policy: &PolicyHandle,
    subtask: &Subtask,
    env: &EnvironmentMap,
    cfg: &FidelityConfig,
    n_trials: u32,
    alpha: f64,
    seed: u64,
) -> Result<EmpiricalEstimate, VerifyError> {
    if n_trials == 0 {
        return Err(VerifyError::InvalidCount {
            successes: 0,
            trials: 0,
        });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(VerifyError::InvalidAlpha(alpha));
    }
    cfg.validate()?;
    env.validate()?;
    let outcomes: Result<Vec<bool>, SimError> = (0..n_trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, "verify-start", i);
            let start = sample_entry_state(subtask, &mut rng);
            let ep = Episode::new(subtask, start, env, cfg, derive_seed(seed, "verify", i), false)?;
            Ok(drive(ep, policy, derive_seed(seed, "verify", i)).outcome == EpisodeOutcome::Success)
        })
        .collect();
    let successes = outcomes?.into_iter().filter(|ok| *ok).count() as u64;
    let trials = n_trials as u64;
    Ok(EmpiricalEstimate {
        subtask_id: subtask.id.clone(),
        successes,
        trials,
        p_hat: successes as f64 / trials as f64,
        lower_bound: lower_confidence_bound(successes, trials, alpha)?,
        alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionOutcome {
    Success,
    SubtaskTimeout,
    Collision,
    /// The robot is not inside the entry region of the selected subtask.
    NoSubtaskAvailable,
    /// The meta-policy revisited a high-level state, so it cycles forever.
    HopLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionResult {
    pub outcome: CompositionOutcome,
    /// `(high-level state, subtask chosen there)` per executed subtask.
    pub high_level_trace: Vec<(StateId, SubtaskId)>,
    pub final_state: StateId,
    /// Concatenated trajectory across all executed subtasks.
    pub trajectory: Vec<TrajectorySample>,
    pub final_robot_state: RobotState,
}

/// Executes `mu` from `task.initial_pose`, handing the true robot state from
/// one subtask policy to the next.
#[allow(clippy::too_many_arguments)]
pub fn execute_composition(
    hlm: &Hlm,
    mu: &MetaPolicy,
    subtasks: &[Subtask],
    policies: &BTreeMap<SubtaskId, PolicyHandle>,
    task: &TaskSpec,
    env: &EnvironmentMap,
    cfg: &FidelityConfig,
    seed: u64,
) -> Result<CompositionResult, VerifyError> {
    compose(hlm, mu, subtasks, policies, task, env, cfg, seed, true)
}

#[allow(clippy::too_many_arguments)]
fn compose(
    hlm: &Hlm,
    mu: &MetaPolicy,
    subtasks: &[Subtask],
    policies: &BTreeMap<SubtaskId, PolicyHandle>,
    task: &TaskSpec,
    env: &EnvironmentMap,
    cfg: &FidelityConfig,
    seed: u64,
    record: bool,
) -> Result<CompositionResult, VerifyError> {
    let by_id: BTreeMap<&SubtaskId, &Subtask> = subtasks.iter().map(|s| (&s.id, s)).collect();
    let mut state = hlm.initial().clone();
    let mut robot = RobotState::at_rest(task.initial_pose);
    let mut trace = Vec::new();
    let mut trajectory = Vec::new();
    let mut elapsed = 0.0;

    let finish = |outcome, state: StateId, trace, trajectory, robot| {
        Ok(CompositionResult {
            outcome,
            high_level_trace: trace,
            final_state: state,
            trajectory,
            final_robot_state: robot,
        })
    };

    for hop in 0..=hlm.states().len() as u64 {
        if state == *hlm.goal() {
            return finish(CompositionOutcome::Success, state, trace, trajectory, robot);
        }
        if hop == hlm.states().len() as u64 {
            break;
        }
        let c = mu
            .get(&state)
            .ok_or_else(|| VerifyError::UnmappedState(state.clone()))?;
        let policy = policies.get(c).ok_or_else(|| VerifyError::MissingPolicy(c.clone()))?;
        let subtask = *by_id.get(c).ok_or_else(|| VerifyError::UnknownSubtask(c.clone()))?;
        trace.push((state.clone(), c.clone()));
        let ep_seed = derive_seed(seed, "composition", hop);
        let ep = match Episode::new(subtask, robot, env, cfg, ep_seed, record) {
            Ok(ep) => ep.with_time_offset(elapsed),
            Err(SimError::StartOutsideEntry(_)) => {
                return finish(
                    CompositionOutcome::NoSubtaskAvailable,
                    hlm.fail().clone(),
                    trace,
                    trajectory,
                    robot,
                );
            }
            Err(e) => return Err(e.into()),
        };
        let rec = drive(ep, policy, ep_seed);
        elapsed += rec.physics_steps as f64 * cfg.dt_physics;
        robot = rec.final_state;
        // Each segment starts where the previous one ended.
        let skip = usize::from(!trajectory.is_empty());
        trajectory.extend(rec.samples.into_iter().skip(skip));
        match rec.outcome {
            EpisodeOutcome::Success => {
                state = hlm
                    .successor(c)
                    .ok_or_else(|| VerifyError::MissingSuccessor(c.clone()))?
                    .clone();
            }
            EpisodeOutcome::Timeout => {
                return finish(
                    CompositionOutcome::SubtaskTimeout,
                    hlm.fail().clone(),
                    trace,
                    trajectory,
                    robot,
                );
            }
            EpisodeOutcome::Collision => {
                return finish(
                    CompositionOutcome::Collision,
                    hlm.fail().clone(),
                    trace,
                    trajectory,
                    robot,
                );
            }
        }
    }
    finish(CompositionOutcome::HopLimit, state, trace, trajectory, robot)
}

/// Runs `n_runs` independent compositions and counts successes.
#[allow(clippy::too_many_arguments)]
pub fn count_composition_successes(
    hlm: &Hlm,
    mu: &MetaPolicy,
    subtasks: &[Subtask],
    policies: &BTreeMap<SubtaskId, PolicyHandle>,
    task: &TaskSpec,
    env: &EnvironmentMap,
    cfg: &FidelityConfig,
    n_runs: u64,
    seed: u64,
) -> Result<u64, VerifyError> {
    let results: Result<Vec<bool>, VerifyError> = (0..n_runs)
        .into_par_iter()
        .map(|i| {
            let r = compose(
                hlm,
                mu,
                subtasks,
                policies,
                task,
                env,
                cfg,
                derive_seed(seed, "composition-run", i),
                false,
            )?;
            Ok(r.outcome == CompositionOutcome::Success)
        })
        .collect();
    Ok(results?.into_iter().filter(|ok| *ok).count() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskCheck {
    pub subtask_id: SubtaskId,
    pub required: f64,
    pub p_hat: Option<f64>,
    pub lower_bound: Option<f64>,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub bound: f64,
    pub n_runs: u64,
    pub observed_successes: u64,
    pub observed_rate: f64,
    /// Three binomial standard deviations at the bound.
    pub tolerance: f64,
    pub violation: bool,
    pub subtasks: Vec<SubtaskCheck>,
}

/// Compares an observed composition success count against the HLM bound.
pub fn check_bound(
    hlm: &Hlm,
    mu: &MetaPolicy,
    params: &ParamVector,
    estimates: &BTreeMap<SubtaskId, EmpiricalEstimate>,
    n_full_runs: u64,
    observed_successes: u64,
) -> Result<BoundCheck, VerifyError> {
    if n_full_runs == 0 || observed_successes > n_full_runs {
        return Err(VerifyError::InvalidCount {
            successes: observed_successes,
            trials: n_full_runs,
        });
    }
    let bound = reach_probability(hlm, mu, params)?;
    let n = n_full_runs as f64;
    let tolerance = 3.0 * (bound * (1.0 - bound) / n).sqrt();
    let observed_rate = observed_successes as f64 / n;
    let subtasks = mu
        .choice
        .values()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .map(|c| {
            let required = params.get(c).unwrap_or(0.0);
            let est = estimates.get(c);
            SubtaskCheck {
                subtask_id: c.clone(),
                required,
                p_hat: est.map(|e| e.p_hat),
                lower_bound: est.map(|e| e.lower_bound),
                satisfied: est.is_some_and(|e| e.p_hat >= required),
            }
        })
        .collect();
    Ok(BoundCheck {
        bound,
        n_runs: n_full_runs,
        observed_successes,
        observed_rate,
        tolerance,
        violation: observed_rate < bound - tolerance,
        subtasks,
    })
}

/// Plain-text verification table, one line per subtask.
pub fn render_estimates(estimates: &[EmpiricalEstimate], params: &ParamVector, gate_on_lower_bound: bool) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# entry states sampled uniformly; the estimate is an average over the entry region, not a worst case"
    );
    let _ = writeln!(out, "subtask\tsuccesses\ttrials\tp_hat\tlower_bound\tp_c\tresult");
    for e in estimates {
        let p_c = params.get(&e.subtask_id).unwrap_or(0.0);
        let gate = if gate_on_lower_bound { e.lower_bound } else { e.p_hat };
        let verdict = if gate >= p_c { "pass" } else { "fail" };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}",
            e.subtask_id, e.successes, e.trials, e.p_hat, e.lower_bound, p_c, verdict
        );
    }
    out
}
