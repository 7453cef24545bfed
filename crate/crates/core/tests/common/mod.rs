#![allow(dead_code)]

use std::collections::BTreeMap;

use compose_rl::hlm::{Hlm, MetaPolicy, ParamVector, StateId, SubtaskId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random HLM with `2 + inner` states (inner in 1..=max_states-2) and up to
/// `max_subtasks` subtasks, each available from one inner state and leading
/// to another inner state or the goal.
pub fn random_hlm(seed: u64, max_states: usize, max_subtasks: usize) -> Hlm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inner = rng.random_range(1..=max_states - 2);
    let n_sub = rng.random_range(1..=max_subtasks);
    let state = |i: usize| StateId::new(format!("s{i}"));
    let goal = StateId::new("goal");
    let fail = StateId::new("fail");
    let mut available: BTreeMap<StateId, Vec<SubtaskId>> = BTreeMap::new();
    let mut successor = BTreeMap::new();
    for k in 0..n_sub {
        let c = SubtaskId::new(format!("c{k}"));
        let from = state(rng.random_range(0..inner));
        let to = if rng.random_bool(0.35) {
            goal.clone()
        } else {
            state(rng.random_range(0..inner))
        };
        available.entry(from).or_default().push(c.clone());
        successor.insert(c, to);
    }
    let states: Vec<StateId> = (0..inner).map(state).chain([goal.clone(), fail.clone()]).collect();
    Hlm::new(states, state(0), goal, fail, available, successor).expect("generated HLM is valid")
}

/// Arbitrary deterministic meta-policy (may cycle).
pub fn random_meta_policy(hlm: &Hlm, seed: u64) -> MetaPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut choice = BTreeMap::new();
    for s in hlm.states() {
        let avail = hlm.available(s);
        if !avail.is_empty() {
            choice.insert(s.clone(), avail[rng.random_range(0..avail.len())].clone());
        }
    }
    MetaPolicy { choice }
}

pub fn random_params(hlm: &Hlm, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    hlm.subtasks().map(|c| (c.clone(), rng.random::<f64>())).collect()
}

/// `P[X >= k]` for `X ~ Bin(n, p)`, summed in log space.
pub fn binomial_upper_tail(k: u64, n: u64, p: f64) -> f64 {
    let ln_fact = |m: u64| (1..=m).map(|i| (i as f64).ln()).sum::<f64>();
    (k..=n)
        .map(|j| {
            let ln_c = ln_fact(n) - ln_fact(j) - ln_fact(n - j);
            (ln_c + j as f64 * p.ln() + (n - j) as f64 * (1.0 - p).ln()).exp()
        })
        .sum()
}

/// Clopper-Pearson lower bound by bisection on the binomial tail: the `p`
/// where `P[X >= k] = alpha`.
pub fn clopper_pearson_oracle(k: u64, n: u64, alpha: f64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if binomial_upper_tail(k, n, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
