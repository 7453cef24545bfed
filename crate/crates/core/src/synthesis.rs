//! Parameter synthesis on the high-level model.
//!
//! With a deterministic meta-policy the reachability probability of the HLM
//! is the product of `p_c` along the single high-level path the policy
//! follows. Synthesis therefore enumerates simple paths from the initial to
//! the goal state and, for each, solves
//!
//! ```text
//! minimize   sum_i p_i
//! subject to prod_i p_i >= target,  0 <= p_i <= cap_i
//! ```
//!
//! in closed form (equal allocation on the uncapped coordinates, water-filled
//! against the caps). The cheapest feasible path wins.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use thiserror::Error;

use crate::hlm::{reach_probability, Hlm, HlmError, MetaPolicy, ParamVector, StateId, SubtaskId};

/// Objective values closer than this are treated as ties.
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SynthesisError {
    #[error("goal state is unreachable in the availability graph")]
    NoPath,
    #[error("no meta-policy meets the success requirement under the current caps")]
    Infeasible,
    #[error("invalid synthesis input: {0}")]
    InvalidArgument(String),
    #[error("model too large for brute-force search ({0} states)")]
    TooLarge(usize),
    #[error(transparent)]
    Hlm(#[from] HlmError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisProblem {
    pub hlm: Hlm,
    pub min_success_probability: f64,
    /// Upper bounds `p_c <= cap`; missing subtasks are uncapped.
    pub caps: BTreeMap<SubtaskId, f64>,
}

impl SynthesisProblem {
    pub fn new(hlm: Hlm, min_success_probability: f64) -> Self {
        Self {
            hlm,
            min_success_probability,
            caps: BTreeMap::new(),
        }
    }

    pub fn with_caps(mut self, caps: BTreeMap<SubtaskId, f64>) -> Self {
        self.caps = caps;
        self
    }

    pub fn cap(&self, c: &SubtaskId) -> f64 {
        self.caps.get(c).copied().unwrap_or(1.0)
    }

    fn validate(&self) -> Result<(), SynthesisError> {
        let t = self.min_success_probability;
        if !(0.0..=1.0).contains(&t) {
            return Err(SynthesisError::InvalidArgument(format!(
                "min_success_probability {t} outside [0, 1]"
            )));
        }
        let known: BTreeSet<&SubtaskId> = self.hlm.subtasks().collect();
        for (c, cap) in &self.caps {
            if !known.contains(c) {
                return Err(SynthesisError::InvalidArgument(format!(
                    "cap for unknown subtask `{c}`"
                )));
            }
            if !(0.0..=1.0).contains(cap) {
                return Err(SynthesisError::InvalidArgument(format!(
                    "cap {cap} for `{c}` outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub meta_policy: MetaPolicy,
    pub params: ParamVector,
    /// Subtasks executed by `meta_policy`, in order.
    pub path: Vec<SubtaskId>,
    pub achieved_bound: f64,
    pub objective: f64,
}

/// All simple initial-to-goal paths of the availability graph, sorted
/// lexicographically by subtask id sequence.
pub fn enumerate_paths(hlm: &Hlm) -> Result<Vec<Vec<SubtaskId>>, SynthesisError> {
    fn dfs<'a>(
        hlm: &'a Hlm,
        state: &'a StateId,
        visited: &mut BTreeSet<&'a StateId>,
        prefix: &mut Vec<SubtaskId>,
        out: &mut Vec<Vec<SubtaskId>>,
    ) {
        if state == hlm.goal() {
            out.push(prefix.clone());
            return;
        }
        for c in hlm.available(state) {
            let next = hlm.successor(c).expect("hlm invariant");
            if visited.contains(next) {
                continue;
            }
            visited.insert(next);
            prefix.push(c.clone());
            dfs(hlm, next, visited, prefix, out);
            prefix.pop();
            visited.remove(next);
        }
    }

    let mut out = Vec::new();
    let mut visited = BTreeSet::from([hlm.initial()]);
    dfs(hlm, hlm.initial(), &mut visited, &mut Vec::new(), &mut out);
    if out.is_empty() {
        return Err(SynthesisError::NoPath);
    }
    out.sort();
    Ok(out)
}

/// Meta-policy that walks `path` from the initial state.
pub fn path_policy(hlm: &Hlm, path: &[SubtaskId]) -> MetaPolicy {
    let mut choice = BTreeMap::new();
    let mut state = hlm.initial().clone();
    for c in path {
        choice.insert(state.clone(), c.clone());
        state = hlm.successor(c).cloned().unwrap_or_else(|| hlm.fail().clone());
    }
    MetaPolicy { choice }
}

/// Minimizes `sum p_i` subject to `prod p_i >= target` and `p_i <= caps[i]`.
///
/// At the optimum the product constraint is active and every coordinate not
/// pinned at its cap takes the same value `t`. Coordinates whose cap is below
/// the current `t` are pinned and `t` is recomputed until nothing moves.
pub fn allocate_path_probs(n: usize, target: f64, caps: &[f64]) -> Result<Vec<f64>, SynthesisError> {
    if n == 0 {
        return Err(SynthesisError::InvalidArgument("path length must be >= 1".into()));
    }
    if caps.len() != n {
        return Err(SynthesisError::InvalidArgument(format!(
            "expected {n} caps, got {}",
            caps.len()
        )));
    }
    if !(target > 0.0 && target <= 1.0) {
        return Err(SynthesisError::InvalidArgument(format!(
            "target {target} outside (0, 1]"
        )));
    }
    if caps.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(SynthesisError::InvalidArgument("caps must lie in [0, 1]".into()));
    }
    if caps.iter().product::<f64>() < target {
        return Err(SynthesisError::Infeasible);
    }

    let mut pinned = vec![false; n];
    loop {
        let free = pinned.iter().filter(|p| !**p).count();
        let pinned_product: f64 = caps.iter().zip(&pinned).filter(|(_, p)| **p).map(|(c, _)| *c).product();
        // `free > 0` whenever the cap product reaches the target.
        let mut level = (target / pinned_product).powf(1.0 / free as f64).min(1.0);

        let mut moved = false;
        for (i, cap) in caps.iter().enumerate() {
            if !pinned[i] && *cap < level {
                pinned[i] = true;
                moved = true;
            }
        }
        if moved {
            continue;
        }

        let assemble = |level: f64| -> Vec<f64> {
            caps.iter()
                .zip(&pinned)
                .map(|(c, p)| if *p { *c } else { level })
                .collect()
        };
        let mut out = assemble(level);
        // Round up until the product clears the target exactly.
        while out.iter().product::<f64>() < target && level < 1.0 {
            level = level.next_up().min(1.0);
            out = assemble(level);
        }
        return Ok(out);
    }
}

fn finish(
    problem: &SynthesisProblem,
    path: Vec<SubtaskId>,
    path_params: &[f64],
) -> Result<SynthesisResult, SynthesisError> {
    let hlm = &problem.hlm;
    let mut params: ParamVector = hlm.subtasks().map(|c| (c.clone(), 0.0)).collect();
    for (c, p) in path.iter().zip(path_params) {
        params.values.insert(c.clone(), *p);
    }
    let meta_policy = path_policy(hlm, &path);
    let achieved_bound = reach_probability(hlm, &meta_policy, &params)?;
    Ok(SynthesisResult {
        meta_policy,
        params,
        objective: path_params.iter().sum(),
        path,
        achieved_bound,
    })
}

/// Strictly better under (objective, path length, lexicographic path).
fn better(obj: f64, path: &[SubtaskId], best_obj: f64, best_path: &[SubtaskId]) -> bool {
    if obj < best_obj - TIE_TOL {
        return true;
    }
    if obj > best_obj + TIE_TOL {
        return false;
    }
    (path.len(), path) < (best_path.len(), best_path)
}

/// Finds the deterministic meta-policy and minimal per-subtask values whose
/// HLM reachability meets `problem.min_success_probability`.
pub fn synthesize(problem: &SynthesisProblem) -> Result<SynthesisResult, SynthesisError> {
    problem.validate()?;
    let target = problem.min_success_probability;
    let mut best: Option<(f64, Vec<SubtaskId>, Vec<f64>)> = None;

    for path in enumerate_paths(&problem.hlm)? {
        let alloc = if path.is_empty() || target == 0.0 {
            vec![0.0; path.len()]
        } else {
            let caps: Vec<f64> = path.iter().map(|c| problem.cap(c)).collect();
            match allocate_path_probs(path.len(), target, &caps) {
                Ok(p) => p,
                Err(SynthesisError::Infeasible) => continue,
                Err(e) => return Err(e),
            }
        };
        let obj: f64 = alloc.iter().sum();
        let replace = match &best {
            None => true,
            Some((b, bp, _)) => better(obj, &path, *b, bp),
        };
        if replace {
            best = Some((obj, path, alloc));
        }
    }

    let (_, path, alloc) = best.ok_or(SynthesisError::Infeasible)?;
    finish(problem, path, &alloc)
}

/// Exhaustive reference solver.
///
/// Enumerates every deterministic meta-policy over the non-terminal states,
/// follows it from the initial state, and for each policy that reaches the
/// goal searches the parameter grid `{0, step, 2 step, ..., 1}` on its path.
/// The grid search is an exact dynamic program over integer grid units: for
/// every attainable sum it keeps the largest attainable product, which is the
/// full grid optimum for a sum objective under a product constraint.
pub fn brute_force_synthesize(problem: &SynthesisProblem, grid_step: f64) -> Result<SynthesisResult, SynthesisError> {
    problem.validate()?;
    let hlm = &problem.hlm;
    if hlm.states().len() > 8 {
        return Err(SynthesisError::TooLarge(hlm.states().len()));
    }
    let units = (1.0 / grid_step).round();
    if !(1.0..=1000.0).contains(&units) || ((1.0 / grid_step) - units).abs() > 1e-6 {
        return Err(SynthesisError::InvalidArgument(format!(
            "grid step {grid_step} must be 1/k for k <= 1000"
        )));
    }
    let units = units as u64;

    let deciders: Vec<&StateId> = hlm.states().iter().filter(|s| !hlm.available(s).is_empty()).collect();
    let mut odometer = vec![0usize; deciders.len()];
    let mut cache: HashMap<Vec<SubtaskId>, Option<Vec<u64>>> = HashMap::new();
    let mut best: Option<(f64, Vec<SubtaskId>, Vec<u64>)> = None;

    loop {
        let choice: BTreeMap<&StateId, &SubtaskId> = deciders
            .iter()
            .zip(&odometer)
            .map(|(s, i)| (*s, &hlm.available(s)[*i]))
            .collect();

        let mut state = hlm.initial();
        let mut seen = BTreeSet::new();
        let mut path = Vec::new();
        let reached = loop {
            if state == hlm.goal() {
                break true;
            }
            if !seen.insert(state) {
                break false;
            }
            match choice.get(state) {
                Some(c) => {
                    path.push((*c).clone());
                    state = hlm.successor(c).expect("hlm invariant");
                }
                None => break false,
            }
        };

        if reached {
            let grid = cache
                .entry(path.clone())
                .or_insert_with(|| {
                    let caps: Vec<f64> = path.iter().map(|c| problem.cap(c)).collect();
                    grid_search(&caps, problem.min_success_probability, units)
                })
                .clone();
            if let Some(ks) = grid {
                let obj = ks.iter().sum::<u64>() as f64 / units as f64;
                let replace = match &best {
                    None => true,
                    Some((b, bp, _)) => better(obj, &path, *b, bp),
                };
                if replace {
                    best = Some((obj, path, ks));
                }
            }
        }

        // Advance the odometer.
        let mut i = 0;
        loop {
            if i == odometer.len() {
                let (_, path, ks) = best.ok_or(SynthesisError::Infeasible)?;
                let params: Vec<f64> = ks.iter().map(|k| *k as f64 / units as f64).collect();
                let mut result = finish(problem, path, &params)?;
                result.achieved_bound = params.iter().product();
                return Ok(result);
            }
            odometer[i] += 1;
            if odometer[i] < hlm.available(deciders[i]).len() {
                break;
            }
            odometer[i] = 0;
            i += 1;
        }
    }
}

/// Minimum-sum grid point with `prod (k_i / units) >= target` and
/// `k_i / units <= caps[i]`, or `None` if no grid point is feasible.
fn grid_search(caps: &[f64], target: f64, units: u64) -> Option<Vec<u64>> {
    let n = caps.len();
    if target == 0.0 || n == 0 {
        return Some(vec![0; n]);
    }
    let kmax: Vec<u64> = caps
        .iter()
        .map(|c| ((c * units as f64) + 1e-9).floor() as u64)
        .collect();
    // Each factor is at most 1, so any feasible k_i / units is itself >= target.
    let kmin = ((target * units as f64).floor() as u64).max(1);

    let width = n * units as usize + 1;
    // best[s] = largest product of chosen units with sum s; choice[layer][s] = last k.
    let mut best: Vec<Option<u128>> = vec![None; width];
    best[0] = Some(1);
    let mut choice: Vec<Vec<u64>> = Vec::with_capacity(n);
    for &hi in &kmax {
        let mut next: Vec<Option<u128>> = vec![None; width];
        let mut pick = vec![0u64; width];
        if kmin <= hi {
            for (s, prod) in best.iter().enumerate() {
                let Some(prod) = prod else { continue };
                for k in kmin..=hi {
                    let t = s + k as usize;
                    let cand = prod * k as u128;
                    if next[t].is_none_or(|cur| cand > cur) {
                        next[t] = Some(cand);
                        pick[t] = k;
                    }
                }
            }
        }
        best = next;
        choice.push(pick);
    }

    let scale = (units as f64).powi(n as i32);
    let s_star = best
        .iter()
        .position(|p| p.is_some_and(|p| p as f64 / scale >= target - 1e-12))?;
    let mut ks = vec![0u64; n];
    let mut s = s_star;
    for layer in (0..n).rev() {
        let k = choice[layer][s];
        ks[layer] = k;
        s -= k as usize;
    }
    Some(ks)
}
