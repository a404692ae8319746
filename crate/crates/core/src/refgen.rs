//! Jerk-bounded maneuver references and the candidate decision set.
//!
//! Lane changes use a lateral acceleration profile shaped as two mirrored
//! isosceles trapezoids (accelerate toward the target lane, then decelerate
//! symmetrically), parameterized by five timestamps. Speed changes use a
//! single trapezoidal acceleration pulse with three timestamps. Both are
//! evaluated in closed form segment by segment — no numeric integration —
//! so references are exact and bitwise deterministic.

use crate::geometry::RoadGeometry;
use crate::limits::MotionLimits;
use crate::state::{Trajectory, VehicleState};
use std::fmt;

/// Lateral component of a maneuver decision. `Left` is +y.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LateralAction {
    Left,
    Keep,
    Right,
}

/// Longitudinal component of a maneuver decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LongitudinalKind {
    Accelerate,
    KeepSpeed,
    Decelerate,
}

/// Longitudinal option with its resolved target speed (m/s).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LongitudinalOption {
    pub kind: LongitudinalKind,
    pub v_target: f64,
}

/// Five-timestamp description of the double-trapezoid lateral profile.
///
/// Jerk is piecewise constant `[+j, 0, -j, 0, +j]` on
/// `[0,t1], [t1,t2], [t2,t3], [t3,t4], [t4,t5]`; acceleration ramps to its
/// peak, holds, reverses through zero to the opposite peak, holds, and
/// returns to zero, which ends the maneuver with zero lateral velocity and
/// acceleration and displacement `d_w`. When the commanded displacement is
/// too small to reach the acceleration bound the profile degenerates to a
/// triangular one (`t1 = t2`, zero-length hold segments).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LateralTimestamps {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub t4: f64,
    pub t5: f64,
    /// Jerk magnitude used by the profile (m/s^3).
    pub jerk: f64,
    /// Total lateral displacement the profile produces (m, positive).
    pub d_w: f64,
    pub degenerate: bool,
}

/// Three-timestamp description of the longitudinal speed-change profile.
///
/// Jerk is `[+j, 0, -j]` on `[0,t6], [t6,t7], [t7,t8]` (mirrored for
/// deceleration); acceleration ramps up, holds, and ramps down, changing
/// speed by exactly `dv`. Degenerates to a triangle when `|dv|` is too
/// small to reach the acceleration bound. A zero speed change yields an
/// empty profile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LongitudinalTimestamps {
    pub t6: f64,
    pub t7: f64,
    pub t8: f64,
    /// Jerk magnitude (m/s^3).
    pub jerk: f64,
    /// Signed speed change (m/s).
    pub dv: f64,
    pub degenerate: bool,
}

/// Exact kinematic sample of a jerk-segment profile at one instant.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProfilePoint {
    pub jerk: f64,
    pub accel: f64,
    pub vel: f64,
    pub disp: f64,
}

/// Piecewise-constant-jerk profile with closed-form evaluation.
///
/// Starts from rest (zero acceleration, velocity, displacement). Past the
/// final boundary the profile extrapolates at its terminal velocity with
/// zero acceleration and jerk.
#[derive(Clone, Debug)]
pub struct JerkSegmentProfile {
    bounds: Vec<f64>,
    jerks: Vec<f64>,
    /// (accel, vel, disp) at each boundary, integrated exactly.
    nodes: Vec<(f64, f64, f64)>,
}

impl JerkSegmentProfile {
    /// Build from segment boundaries (non-decreasing, starting at 0) and
    /// per-segment jerk values. Zero-length segments are allowed.
    pub fn from_segments(bounds: Vec<f64>, jerks: Vec<f64>) -> Self {
        assert_eq!(bounds.len(), jerks.len() + 1, "one jerk per segment");
        assert!(bounds.first().copied() == Some(0.0), "profile starts at t=0");
        assert!(
            bounds.windows(2).all(|w| w[1] >= w[0] && w[1].is_finite()),
            "boundaries must be non-decreasing and finite: {bounds:?}"
        );
        let mut nodes = Vec::with_capacity(bounds.len());
        let (mut a, mut v, mut d) = (0.0f64, 0.0f64, 0.0f64);
        nodes.push((a, v, d));
        for (i, &j) in jerks.iter().enumerate() {
            let h = bounds[i + 1] - bounds[i];
            d += v * h + 0.5 * a * h * h + j * h * h * h / 6.0;
            v += a * h + 0.5 * j * h * h;
            a += j * h;
            nodes.push((a, v, d));
        }
        Self { bounds, jerks, nodes }
    }

    /// Empty profile: identically zero, zero duration.
    pub fn empty() -> Self {
        Self::from_segments(vec![0.0], vec![])
    }

    pub fn duration(&self) -> f64 {
        *self.bounds.last().unwrap()
    }

    /// Evaluate at time `t` (clamped below 0, extrapolated past the end).
    pub fn eval(&self, t: f64) -> ProfilePoint {
        let (a_end, v_end, d_end) = *self.nodes.last().unwrap();
        if t >= self.duration() {
            return ProfilePoint {
                jerk: 0.0,
                accel: a_end,
                vel: v_end,
                disp: d_end + v_end * (t - self.duration()),
            };
        }
        if t <= 0.0 {
            return ProfilePoint { jerk: self.jerks.first().copied().unwrap_or(0.0), ..Default::default() };
        }
        // Last boundary <= t; zero-length segments collapse to the same
        // boundary value, so partition_point skips them.
        let i = (self.bounds.partition_point(|&b| b <= t) - 1).min(self.jerks.len() - 1);
        let (a, v, d) = self.nodes[i];
        let j = self.jerks[i];
        let h = t - self.bounds[i];
        ProfilePoint {
            jerk: j,
            accel: a + j * h,
            vel: v + a * h + 0.5 * j * h * h,
            disp: d + v * h + 0.5 * a * h * h + j * h * h * h / 6.0,
        }
    }

    pub fn accel(&self, t: f64) -> f64 {
        self.eval(t).accel
    }

    pub fn vel(&self, t: f64) -> f64 {
        self.eval(t).vel
    }

    pub fn disp(&self, t: f64) -> f64 {
        self.eval(t).disp
    }

    /// Samples at `k*dt` for `k = 0..=n`.
    pub fn sample(&self, dt: f64, n: usize) -> Vec<ProfilePoint> {
        (0..=n).map(|k| self.eval(k as f64 * dt)).collect()
    }
}

/// Timestamps of the double-trapezoid lateral profile for a displacement
/// `d_w` under acceleration bound `a_ymax` and jerk bound `da_ymax`.
///
/// `t1 = a_ymax/da_ymax` is the jerk ramp time and `t2` solves the
/// displacement identity `a_ymax * t2 * (t1 + t2) = d_w`; the remaining
/// boundaries follow from the mirror structure: `t3 = 2*t1 + t2`,
/// `t4 = t1 + 2*t2`, `t5 = 2*(t1 + t2)`. If `t2 < t1` the acceleration
/// bound is unreachable and the profile becomes triangular with
/// `t1 = t2 = cbrt(d_w / (2*da_ymax))` (peak acceleration `da_ymax * t1`),
/// which keeps the displacement exact.
pub fn lateral_timestamps(a_ymax: f64, da_ymax: f64, d_w: f64) -> LateralTimestamps {
    assert!(a_ymax > 0.0 && da_ymax > 0.0, "acceleration/jerk bounds must be positive");
    assert!(d_w > 0.0, "lateral displacement must be positive");
    let t1 = a_ymax / da_ymax;
    let t2 = -0.5 * t1 + 0.5 * (t1 * t1 + 4.0 * d_w / a_ymax).sqrt();
    if t2 < t1 {
        let th = (d_w / (2.0 * da_ymax)).cbrt();
        return LateralTimestamps {
            t1: th,
            t2: th,
            t3: 3.0 * th,
            t4: 3.0 * th,
            t5: 4.0 * th,
            jerk: da_ymax,
            d_w,
            degenerate: true,
        };
    }
    LateralTimestamps {
        t1,
        t2,
        t3: 2.0 * t1 + t2,
        t4: t1 + 2.0 * t2,
        t5: 2.0 * (t1 + t2),
        jerk: da_ymax,
        d_w,
        degenerate: false,
    }
}

impl LateralTimestamps {
    /// The jerk profile realizing this timing (positive displacement).
    pub fn jerk_profile(&self) -> JerkSegmentProfile {
        let j = self.jerk;
        JerkSegmentProfile::from_segments(
            vec![0.0, self.t1, self.t2, self.t3, self.t4, self.t5],
            vec![j, 0.0, -j, 0.0, j],
        )
    }
}

/// Sampled lateral profile at period `dt`, covering the full maneuver.
pub fn lateral_profile(ts: &LateralTimestamps, dt: f64) -> Vec<ProfilePoint> {
    assert!(dt > 0.0);
    let n = (ts.t5 / dt).ceil() as usize;
    ts.jerk_profile().sample(dt, n)
}

/// Timestamps of the longitudinal speed-change profile from `v_x0` to
/// `v_x1` under acceleration bound `a_xmax` and jerk bound `da_xmax`.
///
/// `t6 = a_xmax/da_xmax` is the jerk ramp time, `t7 = |dv|/a_xmax` the
/// nominal hold boundary, `t8 = t6 + t7` the total duration. If `t7 < t6`
/// the profile is a triangle with `t6 = t7 = sqrt(|dv|/da_xmax)`. A zero
/// speed change yields all-zero timestamps.
pub fn longitudinal_timestamps(
    a_xmax: f64,
    da_xmax: f64,
    v_x0: f64,
    v_x1: f64,
) -> LongitudinalTimestamps {
    assert!(a_xmax > 0.0 && da_xmax > 0.0, "acceleration/jerk bounds must be positive");
    let dv = v_x1 - v_x0;
    if dv == 0.0 {
        return LongitudinalTimestamps { t6: 0.0, t7: 0.0, t8: 0.0, jerk: da_xmax, dv, degenerate: false };
    }
    let t6 = a_xmax / da_xmax;
    let t7 = dv.abs() / a_xmax;
    if t7 < t6 {
        let th = (dv.abs() / da_xmax).sqrt();
        return LongitudinalTimestamps { t6: th, t7: th, t8: 2.0 * th, jerk: da_xmax, dv, degenerate: true };
    }
    LongitudinalTimestamps { t6, t7, t8: t6 + t7, jerk: da_xmax, dv, degenerate: false }
}

impl LongitudinalTimestamps {
    /// The jerk profile realizing this speed change (signed by `dv`).
    pub fn jerk_profile(&self) -> JerkSegmentProfile {
        if self.dv == 0.0 {
            return JerkSegmentProfile::empty();
        }
        let j = self.jerk * self.dv.signum();
        JerkSegmentProfile::from_segments(vec![0.0, self.t6, self.t7, self.t8], vec![j, 0.0, -j])
    }
}

/// A candidate maneuver: lateral action x longitudinal option realized as
/// a reference trajectory.
#[derive(Clone, Debug)]
pub struct DecisionCandidate {
    pub lateral: LateralAction,
    pub longitudinal: LongitudinalOption,
    /// Reference trajectory: sample 0 is the current state, followed by
    /// `T_d/dt` future samples at period `dt`.
    pub reference: Trajectory,
    /// Position of this candidate in its decision set (stable per state).
    pub index: usize,
    pub initial_lane: usize,
    pub target_lane: usize,
}

impl DecisionCandidate {
    pub fn is_lane_change(&self) -> bool {
        self.target_lane != self.initial_lane
    }
}

/// Why a (lateral, longitudinal) combination produced no candidate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CandidateRejection {
    /// No lane exists in the requested direction.
    NoTargetLane,
    /// The maneuver needs longer than the reference horizon.
    ExceedsHorizon { maneuver: f64, horizon: f64 },
}

impl fmt::Display for CandidateRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NoTargetLane => write!(f, "no lane exists in the requested direction"),
            Self::ExceedsHorizon { maneuver, horizon } => {
                write!(f, "maneuver takes {maneuver:.2} s but the reference horizon is {horizon:.2} s")
            }
        }
    }
}

impl std::error::Error for CandidateRejection {}

/// Tunables for decision-set construction.
#[derive(Clone, Copy, Debug)]
pub struct DecisionSetParams {
    /// Sampling period of the references (s).
    pub dt: f64,
    /// Reference horizon T_d (s).
    pub t_d: f64,
    /// Speed offset of the accelerate/decelerate options (m/s).
    pub speed_step: f64,
}

impl Default for DecisionSetParams {
    fn default() -> Self {
        Self { dt: 0.1, t_d: 6.0, speed_step: 3.0 }
    }
}

/// Build one reference trajectory for the given maneuver.
///
/// The lateral displacement targets the center of the adjacent lane (from
/// the nearest lane center to the current position), the longitudinal
/// profile tracks `lon.v_target`, and after both profiles finish the
/// reference continues straight at the target speed. Sample 0 is `state`
/// itself; heading and speed of later samples follow the composed velocity
/// vector.
pub fn build_reference(
    state: &VehicleState,
    lat: LateralAction,
    lon: LongitudinalOption,
    road: &RoadGeometry,
    limits: &MotionLimits,
    params: &DecisionSetParams,
    start_step: i64,
) -> Result<DecisionCandidate, CandidateRejection> {
    let initial_lane = road.nearest_lane(state.y);
    let target_lane = match lat {
        LateralAction::Keep => initial_lane,
        LateralAction::Left => road.left_of(initial_lane).ok_or(CandidateRejection::NoTargetLane)?,
        LateralAction::Right => road.right_of(initial_lane).ok_or(CandidateRejection::NoTargetLane)?,
    };

    let offset = road.center(target_lane) - state.y;
    let lat_profile = if offset.abs() < 1e-9 {
        None
    } else {
        let ts = lateral_timestamps(limits.a_y_max, limits.jerk_y_max, offset.abs());
        Some((ts.jerk_profile(), offset.signum()))
    };

    let v_x0 = state.v * state.psi.cos();
    let lon_ts = longitudinal_timestamps(limits.a_x_max, limits.jerk_x_max, v_x0, lon.v_target);
    let lon_profile = lon_ts.jerk_profile();

    let lat_duration = lat_profile.as_ref().map_or(0.0, |(p, _)| p.duration());
    let maneuver = lat_duration.max(lon_profile.duration());
    if maneuver > params.t_d {
        return Err(CandidateRejection::ExceedsHorizon { maneuver, horizon: params.t_d });
    }

    let steps = (params.t_d / params.dt).round() as usize;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(*state);
    for k in 1..=steps {
        let t = k as f64 * params.dt;
        let lon_pt = lon_profile.eval(t);
        let v_x = v_x0 + lon_pt.vel;
        let x = state.x + v_x0 * t + lon_pt.disp;
        let (y, v_y) = match &lat_profile {
            Some((p, dir)) => {
                let pt = p.eval(t);
                (state.y + dir * pt.disp, dir * pt.vel)
            }
            None => (state.y, 0.0),
        };
        let psi = v_y.atan2(v_x);
        let v = v_x.hypot(v_y);
        states.push(VehicleState::new(x, y, psi, v));
    }

    Ok(DecisionCandidate {
        lateral: lat,
        longitudinal: lon,
        reference: Trajectory::new(start_step, params.dt, states),
        index: 0,
        initial_lane,
        target_lane,
    })
}

/// Enumerate the candidate decision set for the current state.
///
/// Up to 9 candidates: {left, keep, right} x {accelerate, keep speed,
/// decelerate}. Directions without a target lane and maneuvers exceeding
/// the horizon are dropped; target speeds are clamped to the speed bounds
/// and candidates that collapse to the same (lateral action, target speed)
/// are deduplicated, keeping the first. Indices are positions in the
/// returned list and are stable for a given state.
pub fn build_decision_set(
    state: &VehicleState,
    road: &RoadGeometry,
    limits: &MotionLimits,
    params: &DecisionSetParams,
    start_step: i64,
) -> Vec<DecisionCandidate> {
    let v_x0 = state.v * state.psi.cos();
    let mut out: Vec<DecisionCandidate> = Vec::with_capacity(9);
    let mut seen: Vec<(LateralAction, u64)> = Vec::with_capacity(9);
    for lat in [LateralAction::Left, LateralAction::Keep, LateralAction::Right] {
        for kind in
            [LongitudinalKind::Accelerate, LongitudinalKind::KeepSpeed, LongitudinalKind::Decelerate]
        {
            let raw = match kind {
                LongitudinalKind::Accelerate => v_x0 + params.speed_step,
                LongitudinalKind::KeepSpeed => v_x0,
                LongitudinalKind::Decelerate => v_x0 - params.speed_step,
            };
            let v_target = limits.v.clamp(raw);
            let key = (lat, v_target.to_bits());
            if seen.contains(&key) {
                continue;
            }
            let lon = LongitudinalOption { kind, v_target };
            if let Ok(mut cand) = build_reference(state, lat, lon, road, limits, params, start_step) {
                cand.index = out.len();
                seen.push(key);
                out.push(cand);
            }
        }
    }
    out
}
