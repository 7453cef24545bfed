//! The outer loop: synthesize subtask requirements, train and verify the
//! subtasks on the chosen path, cap the ones that cannot meet their
//! requirement, re-synthesize, and finally check the whole composition.

pub mod config;
pub mod export;
pub mod svg;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hlm::{HlmError, ParamVector, Subtask, SubtaskId};
use crate::policy::codec::{subtask_fingerprint, CodecError, PolicyFile};
use crate::policy::{train_subtask_policy, PolicyError, PolicyHandle, TrainBudget};
use crate::seed::derive_seed;
use crate::synthesis::{synthesize, SynthesisError, SynthesisProblem, SynthesisResult};
use crate::verify::{
    check_bound, count_composition_successes, estimate_success_probability, execute_composition, BoundCheck,
    CompositionOutcome, EmpiricalEstimate, VerifyError,
};

pub use config::{ConfigError, PipelineConfig, SubtaskConfig};
pub use export::{export_results, read_trajectory_csv, write_trajectory_csv, TRAJECTORY_HEADER};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no estimate for subtask `{0}`")]
    MissingEstimate(SubtaskId),
    #[error("unknown subtask `{0}`")]
    UnknownSubtask(SubtaskId),
    #[error("no policy file for subtask `{0}`")]
    MissingPolicy(SubtaskId),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: CodecError,
    },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error(transparent)]
    Hlm(#[from] HlmError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    OverallSuccess,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u32,
    /// Caps in force when this iteration synthesized.
    pub caps: BTreeMap<SubtaskId, f64>,
    pub synthesis: SynthesisResult,
    /// Estimates before any retraining this iteration.
    pub initial_estimates: BTreeMap<SubtaskId, EmpiricalEstimate>,
    /// Estimates after retraining; equal to `initial_estimates` for
    /// subtasks that were not retrained.
    pub estimates: BTreeMap<SubtaskId, EmpiricalEstimate>,
    pub underperformers: BTreeSet<SubtaskId>,
    pub caps_added: BTreeMap<SubtaskId, f64>,
    /// Trained from scratch this iteration.
    pub trained: BTreeSet<SubtaskId>,
    pub retrained: BTreeSet<SubtaskId>,
    /// Existing parameters used unchanged.
    pub reused: BTreeSet<SubtaskId>,
    pub composition_check: Option<BoundCheck>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionRollout {
    pub index: u32,
    pub outcome: CompositionOutcome,
    pub trajectory: Vec<crate::sim::TrajectorySample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub status: RunStatus,
    pub reports: Vec<IterationReport>,
    pub rollouts: Vec<CompositionRollout>,
}

/// Subtasks whose gate value (p_hat, or the lower confidence bound) falls
/// below the synthesized requirement. Subtasks with a zero requirement are
/// never returned.
pub fn identify_underperformers(
    estimates: &BTreeMap<SubtaskId, EmpiricalEstimate>,
    params: &ParamVector,
    gate_on_lower_bound: bool,
) -> Result<BTreeSet<SubtaskId>, PipelineError> {
    let mut out = BTreeSet::new();
    for (c, p_c) in &params.values {
        if *p_c <= 0.0 {
            continue;
        }
        let e = estimates
            .get(c)
            .ok_or_else(|| PipelineError::MissingEstimate(c.clone()))?;
        let gate = if gate_on_lower_bound { e.lower_bound } else { e.p_hat };
        if gate < *p_c {
            out.insert(c.clone());
        }
    }
    Ok(out)
}

/// Policy parameter files under `<output_dir>/policies`.
pub struct PolicyStore {
    dir: PathBuf,
}

impl PolicyStore {
    pub fn new(output_dir: &Path) -> Self {
        Self {
            dir: output_dir.join("policies"),
        }
    }

    pub fn path(&self, id: &SubtaskId) -> PathBuf {
        self.dir.join(format!("{id}.pol"))
    }

    /// The stored policy, if present and trained for this exact subtask.
    pub fn load(&self, subtask: &Subtask) -> Result<Option<PolicyHandle>, PipelineError> {
        let path = self.path(&subtask.id);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let file = PolicyFile::decode(&bytes).map_err(|source| PipelineError::Codec { path, source })?;
        Ok((file.fingerprint == subtask_fingerprint(subtask)).then_some(file.policy))
    }

    pub fn save(&self, subtask: &Subtask, policy: &PolicyHandle) -> Result<PathBuf, PipelineError> {
        std::fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let path = self.path(&subtask.id);
        let bytes = PolicyFile {
            fingerprint: subtask_fingerprint(subtask),
            policy: policy.clone(),
        }
        .encode();
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
        Ok(path)
    }
}

fn budget_with_seed(budget: &TrainBudget, seed: u64) -> TrainBudget {
    TrainBudget { seed, ..*budget }
}

/// Runs the outer loop. Policy files are read from and written to
/// `config.output_dir`; reports are returned for [`export_results`].
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    config.validate()?;
    let hlm = config.hlm()?;
    let subtasks = config.subtask_list();
    let by_id: BTreeMap<&SubtaskId, &Subtask> = subtasks.iter().map(|s| (&s.id, s)).collect();
    let store = PolicyStore::new(&config.output_dir);
    let low = &config.fidelity_low;
    let env = &config.environment;

    let mut caps: BTreeMap<SubtaskId, f64> = BTreeMap::new();
    let mut policies: BTreeMap<SubtaskId, PolicyHandle> = BTreeMap::new();
    let mut estimates: BTreeMap<SubtaskId, EmpiricalEstimate> = BTreeMap::new();
    let mut reports = Vec::new();

    let estimate = |c: &SubtaskId, policy: &PolicyHandle| {
        estimate_success_probability(
            policy,
            by_id[c],
            env,
            low,
            config.n_verify,
            config.alpha,
            derive_seed(config.seed, &format!("verify/{c}"), 0),
        )
    };

    for iteration in 1..=config.max_outer_iterations {
        let problem = SynthesisProblem::new(hlm.clone(), config.task.min_success_probability).with_caps(caps.clone());
        let synthesis = match synthesize(&problem) {
            Ok(s) => s,
            Err(SynthesisError::Infeasible | SynthesisError::NoPath) => {
                log::info!("iteration {iteration}: synthesis infeasible under caps {caps:?}");
                return Ok(PipelineRun {
                    status: RunStatus::Infeasible,
                    reports,
                    rollouts: Vec::new(),
                });
            }
            Err(e) => return Err(e.into()),
        };
        log::info!(
            "iteration {iteration}: path {}, bound {:.4}",
            synthesis
                .path
                .iter()
                .map(|c| c.as_str())
                .collect::<Vec<_>>()
                .join(" -> "),
            synthesis.achieved_bound
        );

        let mut trained = BTreeSet::new();
        let mut reused = BTreeSet::new();
        for c in &synthesis.path {
            if policies.contains_key(c) {
                reused.insert(c.clone());
                continue;
            }
            let subtask = by_id[c];
            let learner = config.learner_for(c);
            if let Some(p) = store.load(subtask)? {
                if p.kind() == learner.kind() {
                    log::info!("subtask {c}: reusing stored policy");
                    policies.insert(c.clone(), p);
                    reused.insert(c.clone());
                    continue;
                }
            }
            log::info!("subtask {c}: training");
            let budget = budget_with_seed(
                &config.budget,
                derive_seed(config.seed, &format!("train/{c}"), config.budget.seed),
            );
            let report = train_subtask_policy(learner, subtask, env, low, &config.reward, &budget, None)?;
            store.save(subtask, &report.policy)?;
            policies.insert(c.clone(), report.policy);
            trained.insert(c.clone());
        }

        for c in &synthesis.path {
            if !estimates.contains_key(c) {
                estimates.insert(c.clone(), estimate(c, &policies[c])?);
            }
        }
        let on_path: BTreeMap<SubtaskId, EmpiricalEstimate> = synthesis
            .path
            .iter()
            .map(|c| (c.clone(), estimates[c].clone()))
            .collect();
        let underperformers = identify_underperformers(&on_path, &synthesis.params, config.gate_on_lower_bound)?;

        let mut retrained = BTreeSet::new();
        for c in &underperformers {
            log::info!(
                "subtask {c}: p_hat {:.3} below requirement, retraining",
                estimates[c].p_hat
            );
            let subtask = by_id[c];
            let budget = budget_with_seed(
                &config.retrain_budget,
                derive_seed(
                    config.seed,
                    &format!("retrain/{c}/{}", config.retrain_budget.seed),
                    iteration as u64,
                ),
            );
            let report = train_subtask_policy(
                config.learner_for(c),
                subtask,
                env,
                low,
                &config.reward,
                &budget,
                Some(&policies[c]),
            )?;
            if report.policy != policies[c] {
                store.save(subtask, &report.policy)?;
                estimates.insert(c.clone(), estimate(c, &report.policy)?);
                policies.insert(c.clone(), report.policy);
            }
            reused.remove(c);
            retrained.insert(c.clone());
        }

        let final_estimates: BTreeMap<SubtaskId, EmpiricalEstimate> = synthesis
            .path
            .iter()
            .map(|c| (c.clone(), estimates[c].clone()))
            .collect();
        let still_failing = identify_underperformers(&final_estimates, &synthesis.params, config.gate_on_lower_bound)?;
        let mut caps_added = BTreeMap::new();
        for c in &still_failing {
            let p_hat = final_estimates[c].p_hat;
            let cap = caps.get(c).map_or(p_hat, |old: &f64| old.min(p_hat));
            caps.insert(c.clone(), cap);
            caps_added.insert(c.clone(), cap);
            log::info!("subtask {c}: capped at {cap:.3}");
        }

        let mut report = IterationReport {
            iteration,
            caps: problem.caps.clone(),
            synthesis,
            initial_estimates: on_path,
            estimates: final_estimates,
            underperformers,
            caps_added,
            trained,
            retrained,
            reused,
            composition_check: None,
        };
        if !report.caps_added.is_empty() {
            reports.push(report);
            continue;
        }

        let high = &config.fidelity_high;
        let mu = &report.synthesis.meta_policy;
        let successes = count_composition_successes(
            &hlm,
            mu,
            &subtasks,
            &policies,
            &config.task,
            env,
            high,
            config.n_composition_runs,
            derive_seed(config.seed, "composition-check", iteration as u64),
        )?;
        let check = check_bound(
            &hlm,
            mu,
            &report.synthesis.params,
            &report.estimates,
            config.n_composition_runs,
            successes,
        )?;
        log::info!(
            "composition: {successes}/{} successes, bound {:.4}, violation {}",
            config.n_composition_runs,
            check.bound,
            check.violation
        );
        report.composition_check = Some(check);

        let mut rollouts = Vec::new();
        for index in 0..config.export_rollouts {
            let r = execute_composition(
                &hlm,
                mu,
                &subtasks,
                &policies,
                &config.task,
                env,
                high,
                derive_seed(config.seed, "export", index as u64),
            )?;
            rollouts.push(CompositionRollout {
                index,
                outcome: r.outcome,
                trajectory: r.trajectory,
            });
        }
        reports.push(report);
        return Ok(PipelineRun {
            status: RunStatus::OverallSuccess,
            reports,
            rollouts,
        });
    }

    Ok(PipelineRun {
        status: RunStatus::IterationLimit,
        reports,
        rollouts: Vec::new(),
    })
}
