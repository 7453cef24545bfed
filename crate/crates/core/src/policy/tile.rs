//! Reference learner: tile-coded action values over a small discrete action
//! set, trained with Sarsa(lambda).
//!
//! The observation is reduced to `(goal_dx, goal_dy, relative_heading)`,
//! which fixes the robot pose relative to the goal. Each tiling partitions a
//! box around the subtask geometry; tilings are offset asymmetrically.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::hlm::Subtask;
use crate::sim::{Action, ActionLimits, Observation};

pub const DIMS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileCoder {
    pub tilings: u32,
    pub bins: [u32; DIMS],
    pub lo: [f64; DIMS],
    pub hi: [f64; DIMS],
}

impl TileCoder {
    /// Box covering the entry and exit discs in the goal frame, plus `margin`.
    pub fn for_subtask(subtask: &Subtask, tilings: u32, bins: [u32; DIMS], margin: f64) -> Self {
        let g = &subtask.exit;
        let e = &subtask.entry;
        let (s, c) = g.heading.sin_cos();
        let (dx, dy) = (g.center_x - e.center_x, g.center_y - e.center_y);
        let ex = c * dx + s * dy;
        let ey = -s * dx + c * dy;
        let reach = e.position_radius.max(g.position_radius) + margin;
        Self {
            tilings,
            bins,
            lo: [ex.min(0.0) - reach, ey.min(0.0) - reach, -PI],
            hi: [ex.max(0.0) + reach, ey.max(0.0) + reach, PI],
        }
    }

    fn shape_ok(tilings: u32, bins: [u32; DIMS]) -> bool {
        let per: u64 = bins.iter().map(|b| *b as u64 + 1).product();
        tilings > 0 && bins.iter().all(|b| *b > 0 && *b <= 1024) && tilings as u64 * per <= 1 << 24
    }

    pub fn tiles_per_tiling(&self) -> usize {
        self.bins.iter().map(|b| *b as usize + 1).product()
    }

    pub fn num_tiles(&self) -> usize {
        self.tilings as usize * self.tiles_per_tiling()
    }

    pub fn is_valid(&self) -> bool {
        Self::shape_ok(self.tilings, self.bins)
            && self
                .lo
                .iter()
                .zip(&self.hi)
                .all(|(l, h)| l.is_finite() && h.is_finite() && l < h)
    }

    pub fn encode(obs: &Observation) -> [f64; DIMS] {
        [obs.goal_dx, obs.goal_dy, obs.relative_heading]
    }

    /// One active tile index per tiling.
    pub fn active(&self, x: &[f64; DIMS], out: &mut Vec<usize>) {
        out.clear();
        let per = self.tiles_per_tiling();
        for t in 0..self.tilings as usize {
            let mut idx = 0usize;
            #[allow(clippy::needless_range_loop)]
            for d in 0..DIMS {
                let bins = self.bins[d] as f64;
                let width = (self.hi[d] - self.lo[d]) / bins;
                let offset = ((t * (2 * d + 1)) % self.tilings as usize) as f64 / self.tilings as f64;
                let v = if x[d].is_nan() {
                    self.lo[d]
                } else {
                    x[d].clamp(self.lo[d], self.hi[d])
                };
                let u = ((v - self.lo[d]) / width + offset).floor();
                let cell = u.clamp(0.0, bins) as usize;
                idx = idx * (self.bins[d] as usize + 1) + cell;
            }
            out.push(t * per + idx);
        }
    }
}

/// Greedy policy over tile-coded action values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileQPolicy {
    pub coder: TileCoder,
    pub actions: Vec<Action>,
    pub limits: ActionLimits,
    /// `weights[tile * actions.len() + a]`.
    pub weights: Vec<f64>,
}

impl TileQPolicy {
    pub fn new(coder: TileCoder, actions: Vec<Action>, limits: ActionLimits) -> Self {
        let n = coder.num_tiles() * actions.len();
        Self {
            coder,
            actions,
            limits,
            weights: vec![0.0; n],
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.coder.is_valid()
            && !self.actions.is_empty()
            && self.weights.len() == self.coder.num_tiles() * self.actions.len()
    }

    fn values(&self, tiles: &[usize], out: &mut [f64]) {
        let n = self.actions.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        for &tile in tiles {
            let row = &self.weights[tile * n..(tile + 1) * n];
            for (v, w) in out.iter_mut().zip(row) {
                *v += w;
            }
        }
    }

    fn greedy_index(&self, tiles: &[usize], scratch: &mut [f64]) -> usize {
        self.values(tiles, scratch);
        let mut best = 0;
        for (i, v) in scratch.iter().enumerate() {
            if *v > scratch[best] {
                best = i;
            }
        }
        best
    }

    pub fn act(&self, obs: &Observation) -> Action {
        let mut tiles = Vec::with_capacity(self.coder.tilings as usize);
        self.coder.active(&TileCoder::encode(obs), &mut tiles);
        let mut scratch = vec![0.0; self.actions.len()];
        let a = self.actions[self.greedy_index(&tiles, &mut scratch)];
        self.limits.clamp(a).0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileQConfig {
    pub tilings: u32,
    pub bins: [u32; DIMS],
    pub margin: f64,
    /// Linear speed levels as fractions of `[v_min, v_max]`.
    pub v_levels: Vec<f64>,
    /// Number of evenly spaced turn-rate levels across `[w_min, w_max]`.
    pub w_levels: u32,
    pub step_size: f64,
    pub discount: f64,
    pub trace_decay: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Decisions each training action is held for. Greedy evaluation still
    /// acts at every decision.
    pub action_repeat: u32,
    /// Greedy evaluation rollouts per checkpoint.
    pub eval_episodes: u32,
}

impl Default for TileQConfig {
    fn default() -> Self {
        Self {
            tilings: 8,
            bins: [10, 10, 12],
            margin: 2.0,
            v_levels: vec![0.5, 1.0],
            w_levels: 5,
            step_size: 0.1,
            discount: 0.99,
            trace_decay: 0.9,
            epsilon_start: 0.2,
            epsilon_end: 0.02,
            action_repeat: 4,
            eval_episodes: 100,
        }
    }
}

impl TileQConfig {
    pub fn action_set(&self, lim: &ActionLimits) -> Vec<Action> {
        let mut out = Vec::new();
        for f in &self.v_levels {
            let v = lim.v_min + f.clamp(0.0, 1.0) * (lim.v_max - lim.v_min);
            for k in 0..self.w_levels {
                let frac = if self.w_levels == 1 {
                    0.5
                } else {
                    k as f64 / (self.w_levels - 1) as f64
                };
                out.push(Action::new(v, lim.w_min + frac * (lim.w_max - lim.w_min)));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !TileCoder::shape_ok(self.tilings, self.bins) {
            return Err("tilings and bins must be positive and the table at most 2^24 tiles".into());
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err("margin must be non-negative".into());
        }
        if self.v_levels.is_empty() || !self.v_levels.iter().all(|v| unit(*v)) || self.w_levels == 0 {
            return Err("action levels must be non-empty fractions in [0, 1]".into());
        }
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err("step_size must lie in (0, 1]".into());
        }
        if !unit(self.discount) || !unit(self.trace_decay) || !unit(self.epsilon_start) || !unit(self.epsilon_end) {
            return Err("discount, trace_decay and epsilon must lie in [0, 1]".into());
        }
        if self.action_repeat == 0 || self.eval_episodes == 0 {
            return Err("action_repeat and eval_episodes must be positive".into());
        }
        Ok(())
    }

    pub fn fresh_policy(&self, subtask: &Subtask, lim: &ActionLimits) -> TileQPolicy {
        let coder = TileCoder::for_subtask(subtask, self.tilings, self.bins, self.margin);
        TileQPolicy::new(coder, self.action_set(lim), *lim)
    }
}

/// Sparse replacing eligibility traces.
pub(crate) struct Traces {
    value: Vec<f64>,
    active: Vec<usize>,
}

impl Traces {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            value: vec![0.0; n],
            active: Vec::new(),
        }
    }

    pub(crate) fn clear(&mut self) {
        for &i in &self.active {
            self.value[i] = 0.0;
        }
        self.active.clear();
    }

    pub(crate) fn decay(&mut self, factor: f64) {
        let mut k = 0;
        while k < self.active.len() {
            let i = self.active[k];
            self.value[i] *= factor;
            if self.value[i] < 1e-3 {
                self.value[i] = 0.0;
                self.active.swap_remove(k);
            } else {
                k += 1;
            }
        }
    }

    pub(crate) fn set(&mut self, i: usize) {
        if self.value[i] == 0.0 {
            self.active.push(i);
        }
        self.value[i] = 1.0;
    }

    pub(crate) fn apply(&self, weights: &mut [f64], scale: f64) {
        for &i in &self.active {
            weights[i] += scale * self.value[i];
        }
    }
}

/// Learner state carried across one training run.
pub(crate) struct SarsaLambda<'a> {
    pub cfg: &'a TileQConfig,
    pub policy: TileQPolicy,
    traces: Traces,
    tiles: Vec<usize>,
    scratch: Vec<f64>,
}

impl<'a> SarsaLambda<'a> {
    pub(crate) fn new(cfg: &'a TileQConfig, policy: TileQPolicy) -> Self {
        let n = policy.weights.len();
        let na = policy.actions.len();
        Self {
            cfg,
            policy,
            traces: Traces::new(n),
            tiles: Vec::new(),
            scratch: vec![0.0; na],
        }
    }

    pub(crate) fn begin_episode(&mut self) {
        self.traces.clear();
    }

    /// Active tiles for `obs` and an epsilon-greedy action index.
    pub(crate) fn choose(&mut self, obs: &Observation, epsilon: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, usize) {
        self.policy.coder.active(&TileCoder::encode(obs), &mut self.tiles);
        let a = if rng.random::<f64>() < epsilon {
            rng.random_range(0..self.policy.actions.len())
        } else {
            self.policy.greedy_index(&self.tiles, &mut self.scratch)
        };
        (self.tiles.clone(), a)
    }

    fn q(&mut self, tiles: &[usize], a: usize) -> f64 {
        self.policy.values(tiles, &mut self.scratch);
        self.scratch[a]
    }

    /// TD update for `(tiles, a) -> reward -> next`. `next = None` marks a
    /// terminal transition.
    pub(crate) fn update(&mut self, tiles: &[usize], a: usize, reward: f64, next: Option<(&[usize], usize)>) {
        let na = self.policy.actions.len();
        let q = self.q(tiles, a);
        let target = match next {
            Some((nt, na_idx)) => reward + self.cfg.discount * self.q(nt, na_idx),
            None => reward,
        };
        let delta = target - q;
        for &t in tiles {
            self.traces.set(t * na + a);
        }
        let alpha = self.cfg.step_size / self.policy.coder.tilings as f64;
        self.traces.apply(&mut self.policy.weights, alpha * delta);
        self.traces.decay(self.cfg.discount * self.cfg.trace_decay);
    }
}
