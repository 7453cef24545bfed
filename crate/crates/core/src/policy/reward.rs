use serde::{Deserialize, Serialize};

use crate::geometry::wrap_angle;
use crate::hlm::Subtask;
use crate::sim::RobotState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub success_reward: f64,
    pub collision_reward: f64,
    /// Penalty per meter of distance to the exit center.
    pub w_distance: f64,
    /// Penalty per radian of heading error against the exit heading.
    pub w_heading: f64,
    /// Penalty per radian of heading change since the previous step.
    pub w_heading_change: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            success_reward: 5.0,
            collision_reward: -20.0,
            w_distance: 0.1,
            w_heading: 0.1,
            w_heading_change: 0.1,
        }
    }
}

impl RewardWeights {
    pub fn is_valid(&self) -> bool {
        self.success_reward > 0.0
            && self.collision_reward < 0.0
            && [self.w_distance, self.w_heading, self.w_heading_change]
                .iter()
                .all(|w| w.is_finite() && *w >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Continue,
    Success,
    Collision,
}

pub fn reward(prev: &RobotState, cur: &RobotState, outcome: StepKind, subtask: &Subtask, w: &RewardWeights) -> f64 {
    match outcome {
        StepKind::Success => w.success_reward,
        StepKind::Collision => w.collision_reward,
        StepKind::Continue => {
            let exit = &subtask.exit;
            let dist = exit.distance_to(cur.x, cur.y);
            let heading_err = wrap_angle(cur.heading - exit.heading).abs();
            let heading_change = wrap_angle(cur.heading - prev.heading).abs();
            -(w.w_distance * dist + w.w_heading * heading_err + w.w_heading_change * heading_change)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, PoseRegion};

    fn st() -> Subtask {
        Subtask {
            id: "c".into(),
            entry: PoseRegion::new(0.0, 0.0, 3.0, 0.0, 0.5),
            exit: PoseRegion::new(10.0, 0.0, 1.0, 0.0, 0.4),
            timeout: 10.0,
        }
    }

    #[test]
    fn terminal_rewards() {
        let s = RobotState::at_rest(Pose::new(0.0, 0.0, 0.0));
        let w = RewardWeights::default();
        assert_eq!(reward(&s, &s, StepKind::Success, &st(), &w), 5.0);
        assert_eq!(reward(&s, &s, StepKind::Collision, &st(), &w), -20.0);
    }

    #[test]
    fn step_penalty_arithmetic() {
        // 2 m from the exit, heading error 0.5, heading change 0.2.
        let prev = RobotState::at_rest(Pose::new(8.0, 0.0, 0.3));
        let cur = RobotState::at_rest(Pose::new(8.0, 0.0, 0.5));
        let r = reward(&prev, &cur, StepKind::Continue, &st(), &RewardWeights::default());
        assert!((r + 0.27).abs() < 1e-12);
    }
}
