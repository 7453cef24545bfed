//! Subtasks, the task specification, and the high-level model (HLM).
//!
//! The HLM is a parametric MDP: each high-level state is a class of robot
//! poses that admit the same set of subtasks, choosing subtask `c` moves to
//! `successor(c)` with probability `p_c` and to the failure state otherwise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

use crate::geometry::{Pose, PoseRegion};

#[derive(Debug, Error, PartialEq)]
pub enum HlmError {
    #[error("malformed region {0:?}: tolerances must be positive and finite")]
    MalformedRegion(PoseRegion),
    #[error("subtask list is empty")]
    EmptySubtaskSet,
    #[error("duplicate subtask id `{0}`")]
    DuplicateSubtask(SubtaskId),
    #[error("subtask `{0}` has a non-positive or non-finite timeout")]
    InvalidTimeout(SubtaskId),
    #[error("min_success_probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("subtasks are not composable: exit of `{exit}` partially overlaps entry of `{entry}`")]
    NotComposable { exit: SubtaskId, entry: SubtaskId },
    #[error("subtasks are not compatible with the task: {0}")]
    Incompatible(&'static str),
    #[error("exit region of subtask `{0}` spans more than one high-level state")]
    AmbiguousSuccessor(SubtaskId),
    #[error("invalid high-level model: {0}")]
    InvalidHlm(String),
    #[error("invalid meta-policy: {0}")]
    InvalidMetaPolicy(String),
    #[error("no parameter value for subtask `{0}`")]
    IncompleteParams(SubtaskId),
    #[error("parameter for subtask `{0}` is outside [0, 1]")]
    InvalidParam(SubtaskId),
}

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

string_id!(SubtaskId);
string_id!(StateId);

/// Entry conditions, exit conditions and a time limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subtask {
    pub id: SubtaskId,
    pub entry: PoseRegion,
    pub exit: PoseRegion,
    /// Seconds of simulated time before the subtask counts as failed.
    pub timeout: f64,
}

impl Subtask {
    pub fn validate(&self) -> Result<(), HlmError> {
        self.entry.validate()?;
        self.exit.validate()?;
        if !(self.timeout.is_finite() && self.timeout > 0.0) {
            return Err(HlmError::InvalidTimeout(self.id.clone()));
        }
        Ok(())
    }
}

/// Reach `target` from `initial_pose` with probability at least
/// `min_success_probability`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub initial_pose: Pose,
    pub target: PoseRegion,
    pub min_success_probability: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), HlmError> {
        self.target.validate()?;
        let p = self.min_success_probability;
        if !(0.0..=1.0).contains(&p) {
            return Err(HlmError::InvalidProbability(p));
        }
        Ok(())
    }
}

fn validate_subtasks(subtasks: &[Subtask]) -> Result<(), HlmError> {
    if subtasks.is_empty() {
        return Err(HlmError::EmptySubtaskSet);
    }
    let mut seen = BTreeSet::new();
    for s in subtasks {
        s.validate()?;
        if !seen.insert(&s.id) {
            return Err(HlmError::DuplicateSubtask(s.id.clone()));
        }
    }
    Ok(())
}

/// First ordered pair `(exit_i, entry_j)` that is neither nested nor disjoint.
fn first_overlap(subtasks: &[Subtask]) -> Option<(SubtaskId, SubtaskId)> {
    for a in subtasks {
        for b in subtasks {
            if !(b.entry.contains_region(&a.exit) || b.entry.is_disjoint(&a.exit)) {
                return Some((a.id.clone(), b.id.clone()));
            }
        }
    }
    None
}

/// Every exit region is either inside or disjoint from every entry region.
pub fn check_composable(subtasks: &[Subtask]) -> Result<bool, HlmError> {
    validate_subtasks(subtasks)?;
    Ok(first_overlap(subtasks).is_none())
}

fn compatibility_violation(subtasks: &[Subtask], task: &TaskSpec) -> Option<&'static str> {
    if !subtasks.iter().any(|s| s.entry.contains_pose(&task.initial_pose)) {
        return Some("no entry region contains the initial pose");
    }
    if !subtasks.iter().any(|s| s.exit.approx_eq(&task.target)) {
        return Some("no exit region equals the target");
    }
    if subtasks
        .iter()
        .any(|s| !(s.exit.approx_eq(&task.target) || s.exit.is_disjoint(&task.target)))
    {
        return Some("an exit region partially overlaps the target");
    }
    None
}

/// Checks the three compatibility conditions against `task`.
pub fn check_compatible(subtasks: &[Subtask], task: &TaskSpec) -> Result<bool, HlmError> {
    validate_subtasks(subtasks)?;
    task.validate()?;
    Ok(compatibility_violation(subtasks, task).is_none())
}

/// The high-level model. Construct with [`build_hlm`] or [`Hlm::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hlm {
    states: Vec<StateId>,
    initial: StateId,
    goal: StateId,
    fail: StateId,
    available: BTreeMap<StateId, Vec<SubtaskId>>,
    successor: BTreeMap<SubtaskId, StateId>,
}

impl Hlm {
    pub fn new(
        states: impl IntoIterator<Item = StateId>,
        initial: StateId,
        goal: StateId,
        fail: StateId,
        available: BTreeMap<StateId, Vec<SubtaskId>>,
        successor: BTreeMap<SubtaskId, StateId>,
    ) -> Result<Self, HlmError> {
        let set: BTreeSet<StateId> = states.into_iter().collect();
        let bad = |m: String| Err(HlmError::InvalidHlm(m));
        if goal == fail {
            return bad("goal and fail must differ".into());
        }
        for s in [&initial, &goal, &fail] {
            if !set.contains(s) {
                return bad(format!("state `{s}` is not declared"));
            }
        }
        let mut available = available;
        available.retain(|_, list| !list.is_empty());
        for (state, list) in &available {
            if !set.contains(state) {
                return bad(format!("availability for undeclared state `{state}`"));
            }
            if *state == goal || *state == fail {
                return bad(format!("subtasks available from terminal state `{state}`"));
            }
            let uniq: BTreeSet<_> = list.iter().collect();
            if uniq.len() != list.len() {
                return bad(format!("duplicate subtask in availability of `{state}`"));
            }
            for c in list {
                if !successor.contains_key(c) {
                    return bad(format!("subtask `{c}` has no successor"));
                }
            }
        }
        for (c, next) in &successor {
            if !set.contains(next) {
                return bad(format!("successor of `{c}` is undeclared state `{next}`"));
            }
            if *next == fail {
                return bad(format!("successor of `{c}` is the failure state"));
            }
        }
        Ok(Self {
            states: set.into_iter().collect(),
            initial,
            goal,
            fail,
            available,
            successor,
        })
    }

    pub fn states(&self) -> &[StateId] {
        &self.states
    }

    pub fn initial(&self) -> &StateId {
        &self.initial
    }

    pub fn goal(&self) -> &StateId {
        &self.goal
    }

    pub fn fail(&self) -> &StateId {
        &self.fail
    }

    /// Subtasks that may be started from `state` (empty for terminal states).
    pub fn available(&self, state: &StateId) -> &[SubtaskId] {
        self.available.get(state).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn successor(&self, subtask: &SubtaskId) -> Option<&StateId> {
        self.successor.get(subtask)
    }

    pub fn subtasks(&self) -> impl Iterator<Item = &SubtaskId> {
        self.successor.keys()
    }

    pub fn is_terminal(&self, state: &StateId) -> bool {
        *state == self.goal || *state == self.fail
    }
}

/// Deterministic meta-policy: high-level state to subtask.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetaPolicy {
    pub choice: BTreeMap<StateId, SubtaskId>,
}

impl MetaPolicy {
    pub fn get(&self, state: &StateId) -> Option<&SubtaskId> {
        self.choice.get(state)
    }

    pub fn validate(&self, hlm: &Hlm) -> Result<(), HlmError> {
        for (state, c) in &self.choice {
            if hlm.is_terminal(state) {
                return Err(HlmError::InvalidMetaPolicy(format!(
                    "terminal state `{state}` is mapped"
                )));
            }
            if !hlm.available(state).contains(c) {
                return Err(HlmError::InvalidMetaPolicy(format!(
                    "subtask `{c}` is not available from `{state}`"
                )));
            }
        }
        Ok(())
    }
}

/// One probability per subtask.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector {
    pub values: BTreeMap<SubtaskId, f64>,
}

impl ParamVector {
    pub fn get(&self, c: &SubtaskId) -> Option<f64> {
        self.values.get(c).copied()
    }
}

impl FromIterator<(SubtaskId, f64)> for ParamVector {
    fn from_iter<I: IntoIterator<Item = (SubtaskId, f64)>>(iter: I) -> Self {
        Self {
            values: iter.into_iter().collect(),
        }
    }
}

fn signature_name(sig: &BTreeSet<&SubtaskId>) -> StateId {
    let ids: Vec<&str> = sig.iter().map(|c| c.as_str()).collect();
    StateId(format!("{{{}}}", ids.join(",")))
}

/// Builds the HLM from region descriptors. States other than `goal` and
/// `fail` are named after their availability signature, e.g. `{c1,c2}`, so
/// the result does not depend on the order of `subtasks`.
pub fn build_hlm(subtasks: &[Subtask], task: &TaskSpec) -> Result<Hlm, HlmError> {
    validate_subtasks(subtasks)?;
    task.validate()?;
    if let Some((exit, entry)) = first_overlap(subtasks) {
        return Err(HlmError::NotComposable { exit, entry });
    }
    if let Some(why) = compatibility_violation(subtasks, task) {
        return Err(HlmError::Incompatible(why));
    }

    let goal = StateId::from("goal");
    let fail = StateId::from("fail");
    let mut states = BTreeSet::from([goal.clone(), fail.clone()]);
    let mut available = BTreeMap::new();
    let mut register = |sig: BTreeSet<&SubtaskId>, states: &mut BTreeSet<StateId>| {
        let id = signature_name(&sig);
        states.insert(id.clone());
        available.insert(id.clone(), sig.into_iter().cloned().collect::<Vec<_>>());
        id
    };

    let initial = if task.target.contains_pose(&task.initial_pose) {
        goal.clone()
    } else {
        let sig = subtasks
            .iter()
            .filter(|s| s.entry.contains_pose(&task.initial_pose))
            .map(|s| &s.id)
            .collect();
        register(sig, &mut states)
    };

    let mut successor = BTreeMap::new();
    for s in subtasks {
        let next = if s.exit.approx_eq(&task.target) {
            goal.clone()
        } else {
            if !s.exit.is_disjoint(&task.target) {
                return Err(HlmError::AmbiguousSuccessor(s.id.clone()));
            }
            let mut sig = BTreeSet::new();
            for other in subtasks {
                if other.entry.contains_region(&s.exit) {
                    sig.insert(&other.id);
                } else if !other.entry.is_disjoint(&s.exit) {
                    return Err(HlmError::AmbiguousSuccessor(s.id.clone()));
                }
            }
            register(sig, &mut states)
        };
        successor.insert(s.id.clone(), next);
    }

    Hlm::new(states, initial, goal, fail, available, successor)
}

/// Probability of reaching the goal from the initial state in the Markov
/// chain induced by `mu` and `params`.
///
/// States that cannot reach the goal through positive-probability edges are
/// fixed to 0 first; the remaining linear system is then nonsingular.
pub fn reach_probability(hlm: &Hlm, mu: &MetaPolicy, params: &ParamVector) -> Result<f64, HlmError> {
    mu.validate(hlm)?;
    let mut edge: BTreeMap<&StateId, (&StateId, f64)> = BTreeMap::new();
    for (state, c) in &mu.choice {
        let p = params.get(c).ok_or_else(|| HlmError::IncompleteParams(c.clone()))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(HlmError::InvalidParam(c.clone()));
        }
        let next = hlm.successor(c).expect("validated meta-policy");
        edge.insert(state, (next, p));
    }

    if hlm.initial() == hlm.goal() {
        return Ok(1.0);
    }

    let mut can_reach: BTreeSet<&StateId> = BTreeSet::from([hlm.goal()]);
    loop {
        let before = can_reach.len();
        for (s, (next, p)) in &edge {
            if *p > 0.0 && can_reach.contains(next) {
                can_reach.insert(s);
            }
        }
        if can_reach.len() == before {
            break;
        }
    }
    if !can_reach.contains(hlm.initial()) {
        return Ok(0.0);
    }

    let unknowns: Vec<&StateId> = can_reach.iter().copied().filter(|s| *s != hlm.goal()).collect();
    let index: BTreeMap<&StateId, usize> = unknowns.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let n = unknowns.len();
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for (i, s) in unknowns.iter().enumerate() {
        let (next, p) = edge[s];
        if next == hlm.goal() {
            b[i] += p;
        } else if let Some(&j) = index.get(next) {
            a[(i, j)] -= p;
        }
    }
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| HlmError::InvalidHlm("singular reachability system".into()))?;
    Ok(x[index[hlm.initial()]].clamp(0.0, 1.0))
}
