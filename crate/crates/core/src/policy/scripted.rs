//! Hand-written controllers used where training noise is unwanted.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::geometry::wrap_angle;
use crate::sim::{Action, ActionLimits, Observation};

/// Polar-coordinate pose regulator.
///
/// With `rho` the distance to the goal, `alpha` the bearing to it and
/// `beta = -(relative_heading) - alpha`, commands `v = k_rho * rho` and
/// `w = k_alpha * alpha + k_beta * beta`. It is locally stable for
/// `k_rho > 0`, `k_beta < 0`, `k_alpha > k_rho`. The robot cannot reverse, so
/// a goal behind it is handled by turning on the spot at low speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoToPose {
    pub k_rho: f64,
    pub k_alpha: f64,
    pub k_beta: f64,
    pub limits: ActionLimits,
}

impl Default for GoToPose {
    fn default() -> Self {
        Self {
            k_rho: 1.0,
            k_alpha: 3.0,
            k_beta: -1.2,
            limits: ActionLimits::default(),
        }
    }
}

impl GoToPose {
    pub fn act(&self, obs: &Observation) -> Action {
        let rho = obs.distance();
        let alpha = obs.bearing_to_goal;
        let lim = &self.limits;
        let raw = if alpha.abs() > FRAC_PI_2 {
            Action::new(lim.v_min, if alpha > 0.0 { lim.w_max } else { lim.w_min })
        } else {
            let beta = wrap_angle(-obs.relative_heading - alpha);
            Action::new(
                self.k_rho * rho * alpha.cos(),
                self.k_alpha * alpha + self.k_beta * beta,
            )
        };
        lim.clamp(raw).0
    }
}
