//! Vehicle footprint and road layout.

use serde::{Deserialize, Serialize};

/// Rectangular footprint plus axle split of the kinematic bicycle.
///
/// `lf`/`lr` are the distances from the center of gravity to the front and
/// rear axles; they must fit inside the overall length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleGeometry {
    /// Overall length (m).
    pub length: f64,
    /// Overall width (m).
    pub width: f64,
    /// CoG to front axle (m).
    pub lf: f64,
    /// CoG to rear axle (m).
    pub lr: f64,
}

impl VehicleGeometry {
    pub fn new(length: f64, width: f64, lf: f64, lr: f64) -> Self {
        let g = Self { length, width, lf, lr };
        assert!(g.is_valid(), "invalid vehicle geometry: {g:?}");
        g
    }

    pub fn is_valid(&self) -> bool {
        self.length > 0.0
            && self.width > 0.0
            && self.lf > 0.0
            && self.lr > 0.0
            && self.lf + self.lr <= self.length
            && [self.length, self.width, self.lf, self.lr].iter().all(|v| v.is_finite())
    }

    pub fn half_length(&self) -> f64 {
        0.5 * self.length
    }

    pub fn half_width(&self) -> f64 {
        0.5 * self.width
    }
}

impl Default for VehicleGeometry {
    /// Mid-size car: 4.0 m x 1.8 m, symmetric 1.4 m axle split.
    fn default() -> Self {
        Self { length: 4.0, width: 1.8, lf: 1.4, lr: 1.4 }
    }
}

/// Straight multi-lane road along +x with equally spaced lane centers.
///
/// Lanes are indexed 0..lane_count from right to left (y increasing); "left"
/// always means +y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadGeometry {
    pub lane_count: usize,
    /// Lane width (m).
    pub lane_width: f64,
    /// Center of lane 0 (m). Defaults to 0.
    #[serde(default)]
    pub y0: f64,
}

impl RoadGeometry {
    pub fn new(lane_count: usize, lane_width: f64) -> Self {
        let r = Self { lane_count, lane_width, y0: 0.0 };
        assert!(r.is_valid(), "invalid road geometry: {r:?}");
        r
    }

    pub fn is_valid(&self) -> bool {
        self.lane_count >= 2 && self.lane_width > 0.0 && self.lane_width.is_finite() && self.y0.is_finite()
    }

    /// Lateral position of a lane center.
    pub fn center(&self, lane: usize) -> f64 {
        assert!(lane < self.lane_count, "lane {lane} out of range");
        self.y0 + lane as f64 * self.lane_width
    }

    /// Index of the lane whose center is nearest to `y` (clamped to range).
    pub fn nearest_lane(&self, y: f64) -> usize {
        let i = ((y - self.y0) / self.lane_width).round();
        i.clamp(0.0, (self.lane_count - 1) as f64) as usize
    }

    /// Lane to the left (+y), if any.
    pub fn left_of(&self, lane: usize) -> Option<usize> {
        (lane + 1 < self.lane_count).then_some(lane + 1)
    }

    /// Lane to the right (-y), if any.
    pub fn right_of(&self, lane: usize) -> Option<usize> {
        lane.checked_sub(1)
    }

    /// Lower edge of the drivable region.
    pub fn y_min(&self) -> f64 {
        self.y0 - 0.5 * self.lane_width
    }

    /// Upper edge of the drivable region.
    pub fn y_max(&self) -> f64 {
        self.y0 + (self.lane_count as f64 - 0.5) * self.lane_width
    }

    /// Lateral interval [lo, hi] spanned by a lane.
    pub fn lane_band(&self, lane: usize) -> (f64, f64) {
        let c = self.center(lane);
        (c - 0.5 * self.lane_width, c + 0.5 * self.lane_width)
    }
}

impl Default for RoadGeometry {
    /// Two standard 3.75 m lanes.
    fn default() -> Self {
        Self { lane_count: 2, lane_width: 3.75, y0: 0.0 }
    }
}
