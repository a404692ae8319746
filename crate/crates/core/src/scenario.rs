//! Scenario description: road, ego, surrounding vehicles, driver-parameter
//! ranges. Serialized as JSON for the CLI and test fixtures.

use crate::geometry::{RoadGeometry, VehicleGeometry};
use crate::occupancy;
use crate::state::VehicleState;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

/// Inclusive `[lo, hi]` sampling range.
pub type Range = (f64, f64);

/// Per-vehicle driver parameter ranges; actual values are sampled once per
/// episode. Field names follow the car-following/lane-change model they feed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriverParamRanges {
    /// Desired free-flow speed (m/s).
    pub v0: Range,
    /// Desired time headway (s).
    pub headway: Range,
    /// Standstill minimum gap (m).
    pub min_gap: Range,
    /// Maximum acceleration (m/s^2).
    pub accel: Range,
    /// Comfortable braking (m/s^2, positive).
    pub decel: Range,
    /// Free-flow exponent.
    pub exponent: f64,
    /// Lane-change politeness factor.
    pub politeness: Range,
    /// Lane-change incentive threshold (m/s^2).
    pub threshold: f64,
    /// Max braking imposed on a new follower (m/s^2, positive).
    pub safe_brake: f64,
}

impl Default for DriverParamRanges {
    fn default() -> Self {
        Self {
            v0: (18.0, 25.0),
            headway: (1.0, 1.8),
            min_gap: (2.0, 4.0),
            accel: (1.0, 2.0),
            decel: (1.5, 2.5),
            exponent: 4.0,
            politeness: (0.2, 0.5),
            threshold: 0.1,
            safe_brake: 4.0,
        }
    }
}

impl DriverParamRanges {
    /// A degenerate range pinning every parameter to its midpoint.
    pub fn pinned(self) -> Self {
        fn mid(r: Range) -> Range {
            let m = 0.5 * (r.0 + r.1);
            (m, m)
        }
        Self {
            v0: mid(self.v0),
            headway: mid(self.headway),
            min_gap: mid(self.min_gap),
            accel: mid(self.accel),
            decel: mid(self.decel),
            politeness: mid(self.politeness),
            ..self
        }
    }

    fn ranges_valid(&self) -> bool {
        let ok = |r: Range, lo: f64| r.0 >= lo && r.0 <= r.1 && r.1.is_finite();
        ok(self.v0, 0.0)
            && ok(self.headway, 0.0)
            && ok(self.min_gap, 0.0)
            && ok(self.accel, 1e-6)
            && ok(self.decel, 1e-6)
            && ok(self.politeness, 0.0)
            && self.exponent > 0.0
            && self.safe_brake > 0.0
    }
}

/// A surrounding vehicle: initial state, footprint, and driver behavior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtherVehicle {
    pub state: VehicleState,
    #[serde(default)]
    pub geometry: VehicleGeometry,
    #[serde(default)]
    pub driver: DriverParamRanges,
    /// Stationary obstacles never move and ignore the driver model.
    #[serde(default)]
    pub stationary: bool,
}

/// Complete episode setup. `seed` drives every random element (driver
/// parameter sampling, scenario jitter) so runs are reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub road: RoadGeometry,
    pub ego: VehicleState,
    #[serde(default)]
    pub ego_geometry: VehicleGeometry,
    #[serde(default)]
    pub others: Vec<OtherVehicle>,
    pub seed: u64,
    /// Episode length (s).
    pub duration: f64,
    /// Ego's desired cruise speed (m/s); falls back to the evaluator default.
    #[serde(default)]
    pub v_des: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScenarioError {
    BadRoad,
    BadDuration,
    BadGeometry(usize),
    BadState(usize),
    BadRanges(usize),
    OffRoad(usize),
    /// Initial footprints of the two listed vehicles overlap (0 = ego).
    Overlap(usize, usize),
    Io(String),
    Parse(String),
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadRoad => write!(f, "road must have >= 2 lanes of positive width"),
            Self::BadDuration => write!(f, "duration must be positive"),
            Self::BadGeometry(i) => write!(f, "vehicle {i}: invalid geometry"),
            Self::BadState(i) => write!(f, "vehicle {i}: invalid state"),
            Self::BadRanges(i) => write!(f, "vehicle {i}: invalid driver parameter ranges"),
            Self::OffRoad(i) => write!(f, "vehicle {i}: initial position outside the drivable region"),
            Self::Overlap(i, j) => write!(f, "vehicles {i} and {j}: initial footprints overlap"),
            Self::Io(e) => write!(f, "scenario file: {e}"),
            Self::Parse(e) => write!(f, "scenario parse: {e}"),
        }
    }
}

impl std::error::Error for ScenarioError {}

impl Scenario {
    /// Check every structural invariant. Vehicle index 0 is the ego;
    /// surrounding vehicles are 1-based in error reports.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !self.road.is_valid() {
            return Err(ScenarioError::BadRoad);
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(ScenarioError::BadDuration);
        }

        let mut footprints = Vec::with_capacity(self.others.len() + 1);
        let all = std::iter::once((&self.ego, &self.ego_geometry))
            .chain(self.others.iter().map(|o| (&o.state, &o.geometry)));
        for (i, (state, geom)) in all.enumerate() {
            if !geom.is_valid() {
                return Err(ScenarioError::BadGeometry(i));
            }
            if !state.is_valid() {
                return Err(ScenarioError::BadState(i));
            }
            if state.y < self.road.y_min() || state.y > self.road.y_max() {
                return Err(ScenarioError::OffRoad(i));
            }
            footprints.push(occupancy::footprint(state, geom));
        }
        for (i, o) in self.others.iter().enumerate() {
            if !o.driver.ranges_valid() {
                return Err(ScenarioError::BadRanges(i + 1));
            }
        }
        for i in 0..footprints.len() {
            for j in i + 1..footprints.len() {
                if occupancy::rect_distance(&footprints[i], &footprints[j]) <= 0.0 {
                    return Err(ScenarioError::Overlap(i, j));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialization cannot fail")
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        std::fs::write(path, self.to_json())
            .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))
    }
}
