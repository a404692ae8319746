//! Actuation and state envelopes shared by reference generation and the MPC.

use crate::geometry::{RoadGeometry, VehicleGeometry};
use serde::{Deserialize, Serialize};

/// Closed interval used for box bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub fn new(min: f64, max: f64) -> Self {
        assert!(min <= max, "empty interval [{min}, {max}]");
        Self { min, max }
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        v >= self.min - tol && v <= self.max + tol
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }
}

/// State, control, control-rate, and maneuver-profile envelopes.
///
/// Control-rate bounds are per planning step (Δt), not per second.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionLimits {
    pub x: Interval,
    pub y: Interval,
    pub psi: Interval,
    pub v: Interval,
    /// Longitudinal acceleration command (m/s^2).
    pub a: Interval,
    /// Front steering angle (rad).
    pub delta: Interval,
    /// Acceleration change per step (m/s^2).
    pub da: Interval,
    /// Steering change per step (rad).
    pub ddelta: Interval,
    /// Lateral maneuver acceleration ceiling (m/s^2).
    pub a_y_max: f64,
    /// Lateral maneuver jerk ceiling (m/s^3).
    pub jerk_y_max: f64,
    /// Longitudinal maneuver acceleration ceiling (m/s^2).
    pub a_x_max: f64,
    /// Longitudinal maneuver jerk ceiling (m/s^3).
    pub jerk_x_max: f64,
}

impl Default for MotionLimits {
    fn default() -> Self {
        Self {
            x: Interval::new(-1e9, 1e9),
            y: Interval::new(-1e9, 1e9),
            psi: Interval::new(-0.6, 0.6),
            v: Interval::new(0.0, 35.0),
            a: Interval::new(-6.0, 4.0),
            delta: Interval::new(-0.5, 0.5),
            da: Interval::new(-3.0, 3.0),
            ddelta: Interval::new(-0.1, 0.1),
            a_y_max: 1.0,
            jerk_y_max: 2.0,
            a_x_max: 2.0,
            jerk_x_max: 4.0,
        }
    }
}

impl MotionLimits {
    /// Default limits with the lateral envelope restricted so the footprint
    /// center keeps `width/2` clearance from the drivable edges.
    pub fn for_road(road: &RoadGeometry, geom: &VehicleGeometry) -> Self {
        Self {
            y: Interval::new(road.y_min() + geom.half_width(), road.y_max() - geom.half_width()),
            ..Self::default()
        }
    }

    /// True when a state sits inside the state envelope (within `tol`).
    pub fn state_in_bounds(&self, s: &crate::state::VehicleState, tol: f64) -> bool {
        self.x.contains(s.x, tol)
            && self.y.contains(s.y, tol)
            && self.psi.contains(s.psi, tol)
            && self.v.contains(s.v, tol)
    }

    /// True when a control and its per-step rate from `prev` are in bounds.
    pub fn control_in_bounds(
        &self,
        u: &crate::state::ControlInput,
        prev: &crate::state::ControlInput,
        tol: f64,
    ) -> bool {
        self.a.contains(u.a, tol)
            && self.delta.contains(u.delta, tol)
            && self.da.contains(u.a - prev.a, tol)
            && self.ddelta.contains(u.delta - prev.delta, tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{ControlInput, VehicleState};

    #[test]
    fn road_limits_leave_clearance() {
        let road = RoadGeometry::new(2, 3.75);
        let lim = MotionLimits::for_road(&road, &VehicleGeometry::default());
        assert_eq!(lim.y, Interval::new(-0.975, 4.725));
    }

    #[test]
    fn bound_checks() {
        let lim = MotionLimits::default();
        let ok = VehicleState::new(0.0, 0.0, 0.0, 20.0);
        assert!(lim.state_in_bounds(&ok, 0.0));
        let fast = VehicleState::new(0.0, 0.0, 0.0, 36.0);
        assert!(!lim.state_in_bounds(&fast, 0.0));

        let prev = ControlInput::new(0.0, 0.0);
        assert!(lim.control_in_bounds(&ControlInput::new(2.9, 0.05), &prev, 0.0));
        assert!(!lim.control_in_bounds(&ControlInput::new(3.1, 0.0), &prev, 0.0));
        assert!(!lim.control_in_bounds(&ControlInput::new(0.0, 0.2), &prev, 0.0));
    }
}
