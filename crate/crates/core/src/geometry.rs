//! Planar poses and pose-tolerance regions.
//!
//! A [`PoseRegion`] is a closed disc in the plane crossed with a closed
//! heading arc. Subtask entry/exit conditions and the task target are all
//! expressed this way, which keeps containment and disjointness decidable
//! in closed form.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::hlm::HlmError;

/// Tolerance used when comparing authored region fields for equality.
pub const REGION_EQ_TOL: f64 = 1e-9;

/// Slack applied to the closed-form containment tests so that regions which
/// are equal up to float noise still count as contained.
const CONTAIN_SLACK: f64 = 1e-12;

/// Wraps an angle into `(-PI, PI]`.
pub fn wrap_angle(angle: f64) -> f64 {
    if !angle.is_finite() {
        return angle;
    }
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Planar pose `(x, y, heading)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
        }
    }
}

/// Disc of positions crossed with an arc of headings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRegion {
    #[serde(rename = "x")]
    pub center_x: f64,
    #[serde(rename = "y")]
    pub center_y: f64,
    #[serde(rename = "radius")]
    pub position_radius: f64,
    pub heading: f64,
    pub heading_tolerance: f64,
}

impl PoseRegion {
    pub fn new(center_x: f64, center_y: f64, position_radius: f64, heading: f64, heading_tolerance: f64) -> Self {
        Self {
            center_x,
            center_y,
            position_radius,
            heading: wrap_angle(heading),
            heading_tolerance,
        }
    }

    /// Rejects non-positive or non-finite tolerances and headings outside `(-PI, PI]`.
    pub fn validate(&self) -> Result<(), HlmError> {
        let ok = self.center_x.is_finite()
            && self.center_y.is_finite()
            && self.position_radius.is_finite()
            && self.position_radius > 0.0
            && self.heading.is_finite()
            && self.heading > -PI
            && self.heading <= PI
            && self.heading_tolerance > 0.0
            && self.heading_tolerance <= PI;
        if ok {
            Ok(())
        } else {
            Err(HlmError::MalformedRegion(*self))
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.center_x, self.center_y)
    }

    pub fn center_pose(&self) -> Pose {
        Pose::new(self.center_x, self.center_y, self.heading)
    }

    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        (x - self.center_x).hypot(y - self.center_y)
    }

    fn center_distance(&self, other: &PoseRegion) -> f64 {
        self.distance_to(other.center_x, other.center_y)
    }

    /// Closed membership test (boundary included).
    pub fn contains_pose(&self, pose: &Pose) -> bool {
        self.distance_to(pose.x, pose.y) <= self.position_radius
            && wrap_angle(pose.heading - self.heading).abs() <= self.heading_tolerance
    }

    /// True iff `inner` is a subset of `self`.
    pub fn contains_region(&self, inner: &PoseRegion) -> bool {
        let disc = self.center_distance(inner) + inner.position_radius <= self.position_radius + CONTAIN_SLACK;
        let arc = self.heading_tolerance >= PI
            || wrap_angle(inner.heading - self.heading).abs() + inner.heading_tolerance
                <= self.heading_tolerance + CONTAIN_SLACK;
        disc && arc
    }

    /// True iff the two regions share no pose. Touching boundaries count as
    /// disjoint.
    pub fn is_disjoint(&self, other: &PoseRegion) -> bool {
        let discs = self.center_distance(other) >= self.position_radius + other.position_radius;
        let arcs = wrap_angle(self.heading - other.heading).abs() >= self.heading_tolerance + other.heading_tolerance;
        discs || arcs
    }

    /// Field-wise equality within [`REGION_EQ_TOL`].
    pub fn approx_eq(&self, other: &PoseRegion) -> bool {
        (self.center_x - other.center_x).abs() <= REGION_EQ_TOL
            && (self.center_y - other.center_y).abs() <= REGION_EQ_TOL
            && (self.position_radius - other.position_radius).abs() <= REGION_EQ_TOL
            && wrap_angle(self.heading - other.heading).abs() <= REGION_EQ_TOL
            && (self.heading_tolerance - other.heading_tolerance).abs() <= REGION_EQ_TOL
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
        assert!((wrap_angle(2.0 * PI + 0.25) - 0.25).abs() < 1e-12);
        for k in -50..50 {
            let a = wrap_angle(k as f64 * 0.37);
            assert!(a > -PI && a <= PI);
        }
    }

    #[test]
    fn membership_includes_boundary() {
        let r = PoseRegion::new(0.0, 0.0, 1.0, 0.0, 0.4);
        assert!(r.contains_pose(&Pose::new(1.0, 0.0, 0.4)));
        assert!(!r.contains_pose(&Pose::new(1.0 + 1e-9, 0.0, 0.0)));
        assert!(!r.contains_pose(&Pose::new(0.0, 0.0, 0.41)));
    }

    #[test]
    fn heading_arc_wraps() {
        let r = PoseRegion::new(0.0, 0.0, 1.0, PI, 0.3);
        assert!(r.contains_pose(&Pose::new(0.0, 0.0, -PI + 0.2)));
        let inner = PoseRegion::new(0.0, 0.0, 0.5, -PI + 0.1, 0.1);
        assert!(r.contains_region(&inner));
        let far = PoseRegion::new(0.0, 0.0, 0.5, 0.0, 0.5);
        assert!(r.is_disjoint(&far));
    }

    #[test]
    fn containment_and_overlap_examples() {
        let exit = PoseRegion::new(10.0, 0.0, 1.0, 0.0, 0.4);
        let entry = PoseRegion::new(10.0, 0.0, 3.0, 0.0, 0.5);
        assert!(entry.contains_region(&exit));
        let shifted = PoseRegion::new(13.0, 0.0, 3.0, 0.0, 0.5);
        assert!(!shifted.contains_region(&exit));
        assert!(!shifted.is_disjoint(&exit));
    }

    #[test]
    fn malformed_regions_rejected() {
        assert!(PoseRegion::new(0.0, 0.0, 0.0, 0.0, 0.1).validate().is_err());
        assert!(PoseRegion::new(0.0, 0.0, 1.0, 0.0, 0.0).validate().is_err());
        assert!(PoseRegion::new(0.0, 0.0, 1.0, 0.0, 4.0).validate().is_err());
        assert!(PoseRegion::new(0.0, 0.0, 1.0, 0.0, PI).validate().is_ok());
    }
}
