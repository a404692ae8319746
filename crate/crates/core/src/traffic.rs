//! Background traffic: car-following (IDM) and lane-change (MOBIL)
//! behavior for all non-ego vehicles, plus world stepping.
//!
//! The one-step reaction math ([`participant_reaction`] over a flat
//! [`Participant`] snapshot plus [`advance_vehicle`]) is shared with the
//! interaction-aware predictor, which rolls the same model forward under
//! nominal driver parameters; keeping a single code path makes predicted
//! and simulated reactions agree exactly when parameters match.

use crate::geometry::{RoadGeometry, VehicleGeometry};
use crate::scenario::{DriverParamRanges, Range, Scenario};
use crate::state::VehicleState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Hard physical braking floor (m/s^2): applied on sensor-fault gaps.
pub const HARD_BRAKE: f64 = 9.0;
/// Fixed duration of a background lane-change spline (s).
pub const LANE_CHANGE_DURATION: f64 = 3.0;
/// Hold-off after a completed lane change before another may start (s).
pub const LANE_CHANGE_COOLDOWN: f64 = 3.0;
/// A vehicle counts as occupying a lane when its body overlaps the lane
/// band by at least this fraction of its own width.
pub const LANE_OCCUPANCY_FRACTION: f64 = 0.25;

/// Sampled car-following / lane-change parameters of one driver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriverParams {
    /// Desired free-flow speed (m/s).
    pub v0: f64,
    /// Desired time headway (s).
    pub headway: f64,
    /// Standstill minimum gap (m).
    pub min_gap: f64,
    /// Maximum acceleration (m/s^2).
    pub accel: f64,
    /// Comfortable braking (m/s^2, positive).
    pub decel: f64,
    /// Free-flow exponent.
    pub exponent: f64,
    /// Politeness factor weighting imposed accelerations.
    pub politeness: f64,
    /// Lane-change incentive threshold (m/s^2).
    pub threshold: f64,
    /// Max braking a change may impose on the new follower (m/s^2, positive).
    pub safe_brake: f64,
}

impl DriverParams {
    /// Midpoint of every default sampling range: the deterministic driver
    /// assumed by the interaction-aware predictor.
    pub fn nominal() -> Self {
        sample_driver_params(
            &mut ChaCha8Rng::seed_from_u64(0),
            &DriverParamRanges::default().pinned(),
        )
    }
}

/// Draw one driver uniformly from the given ranges.
pub fn sample_driver_params<R: Rng>(rng: &mut R, ranges: &DriverParamRanges) -> DriverParams {
    fn draw<R: Rng>(rng: &mut R, r: Range) -> f64 {
        rng.gen_range(r.0..=r.1)
    }
    DriverParams {
        v0: draw(rng, ranges.v0),
        headway: draw(rng, ranges.headway),
        min_gap: draw(rng, ranges.min_gap),
        accel: draw(rng, ranges.accel),
        decel: draw(rng, ranges.decel),
        exponent: ranges.exponent,
        politeness: draw(rng, ranges.politeness),
        threshold: ranges.threshold,
        safe_brake: ranges.safe_brake,
    }
}

/// Car-following acceleration (m/s^2).
///
/// `leader` is `(leader speed, bumper-to-bumper gap)` when one exists.
/// The desired gap `s* = s0 + max(0, v*T + v*(v - v_lead)/(2*sqrt(a*b)))`
/// keeps the response monotone (non-increasing in own speed,
/// non-decreasing in gap); the result is clipped to
/// `[-HARD_BRAKE, params.accel]`, and a non-positive gap returns the hard
/// floor outright.
pub fn idm_accel(v: f64, leader: Option<(f64, f64)>, p: &DriverParams) -> f64 {
    debug_assert!(v >= 0.0 && p.v0 > 0.0);
    let free = 1.0 - (v / p.v0).powf(p.exponent);
    let interaction = match leader {
        None => 0.0,
        Some((_, gap)) if gap <= 0.0 => {
            log::debug!("non-positive gap {gap:.3} m: emergency braking");
            return -HARD_BRAKE;
        }
        Some((v_lead, gap)) => {
            let s_star = p.min_gap
                + (v * p.headway + v * (v - v_lead) / (2.0 * (p.accel * p.decel).sqrt())).max(0.0);
            (s_star / gap).powi(2)
        }
    };
    (p.accel * (free - interaction)).clamp(-HARD_BRAKE, p.accel)
}

/// Lateral move selected by the lane-change criterion. `Left` is +y.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LaneDecision {
    Stay,
    Left,
    Right,
}

/// One-step output of the reaction model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reaction {
    pub accel: f64,
    pub decision: LaneDecision,
}

/// Flat snapshot of one road user, ego included, for reaction math.
#[derive(Clone, Copy, Debug)]
pub struct Participant {
    pub x: f64,
    pub y: f64,
    /// Longitudinal speed (m/s).
    pub v: f64,
    pub half_length: f64,
    pub width: f64,
    /// Lane the vehicle is steering toward (target mid-change, else nearest).
    pub control_lane: usize,
    pub stationary: bool,
    /// Parameters others assume when estimating this vehicle's reactions.
    pub driver: DriverParams,
}

/// Lateral overlap of the vehicle body with a lane band (m).
fn lane_overlap(p: &Participant, road: &RoadGeometry, lane: usize) -> f64 {
    let (lo, hi) = road.lane_band(lane);
    let half = 0.5 * p.width;
    ((p.y + half).min(hi) - (p.y - half).max(lo)).max(0.0)
}

/// Whether a participant counts as occupying a lane (able to lead or
/// follow in it). A merging vehicle occupies both lanes during the move.
pub fn occupies_lane(p: &Participant, road: &RoadGeometry, lane: usize) -> bool {
    lane_overlap(p, road, lane) >= LANE_OCCUPANCY_FRACTION * p.width
}

/// Nearest participant occupying `lane` that is ahead of `i` (by center),
/// as `(index, bumper-to-bumper gap)`.
pub fn leader_in_lane(
    parts: &[Participant],
    road: &RoadGeometry,
    i: usize,
    lane: usize,
) -> Option<(usize, f64)> {
    let me = &parts[i];
    parts
        .iter()
        .enumerate()
        .filter(|(j, p)| *j != i && p.x > me.x && occupies_lane(p, road, lane))
        .min_by(|(_, a), (_, b)| a.x.total_cmp(&b.x))
        .map(|(j, p)| (j, (p.x - p.half_length) - (me.x + me.half_length)))
}

/// Nearest participant occupying `lane` that is behind `i` (by center).
pub fn follower_in_lane(
    parts: &[Participant],
    road: &RoadGeometry,
    i: usize,
    lane: usize,
) -> Option<(usize, f64)> {
    let me = &parts[i];
    parts
        .iter()
        .enumerate()
        .filter(|(j, p)| *j != i && p.x < me.x && occupies_lane(p, road, lane))
        .max_by(|(_, a), (_, b)| a.x.total_cmp(&b.x))
        .map(|(j, p)| (j, (me.x - me.half_length) - (p.x + p.half_length)))
}

fn accel_behind(parts: &[Participant], i: usize, leader: Option<(usize, f64)>) -> f64 {
    let me = &parts[i];
    idm_accel(me.v, leader.map(|(j, gap)| (parts[j].v, gap)), &me.driver)
}

/// Lane-change incentive of participant `i` toward `target`, and whether
/// the new follower's required braking stays within the safety limit.
/// Returns `None` when the move is vetoed.
fn change_incentive(
    parts: &[Participant],
    road: &RoadGeometry,
    i: usize,
    current: usize,
    target: usize,
) -> Option<f64> {
    let me = &parts[i];
    let p = me.driver.politeness;

    let a_c = accel_behind(parts, i, leader_in_lane(parts, road, i, current));
    let a_c_new = accel_behind(parts, i, leader_in_lane(parts, road, i, target));

    // New follower: braking it would need behind us, versus its current one.
    let mut imposed = 0.0;
    if let Some((nf, gap_nf)) = follower_in_lane(parts, road, i, target) {
        let a_n = accel_behind(parts, nf, leader_in_lane(parts, road, nf, target));
        let a_n_new = idm_accel(parts[nf].v, Some((me.v, gap_nf)), &parts[nf].driver);
        if a_n_new < -me.driver.safe_brake {
            return None;
        }
        imposed += a_n_new - a_n;
    }
    // Old follower: relieved once we leave.
    if let Some((of, gap_of)) = follower_in_lane(parts, road, i, current) {
        let a_o = idm_accel(parts[of].v, Some((me.v, gap_of)), &parts[of].driver);
        let next_leader = leader_in_lane(parts, road, i, current).map(|(lead, _)| {
            let gap = (parts[lead].x - parts[lead].half_length)
                - (parts[of].x + parts[of].half_length);
            (parts[lead].v, gap)
        });
        let a_o_new = idm_accel(parts[of].v, next_leader, &parts[of].driver);
        imposed += a_o_new - a_o;
    }

    Some(a_c_new - a_c + p * imposed)
}

/// One-step reaction of participant `i`: car-following acceleration in its
/// control lane, plus (when `allow_lane_change`) the lane-change decision
/// maximizing the incentive among safe directions that clear the
/// threshold. Stationary participants never react.
pub fn participant_reaction(
    road: &RoadGeometry,
    parts: &[Participant],
    i: usize,
    allow_lane_change: bool,
) -> Reaction {
    let me = &parts[i];
    if me.stationary {
        return Reaction { accel: 0.0, decision: LaneDecision::Stay };
    }
    let lane = me.control_lane;
    let accel = accel_behind(parts, i, leader_in_lane(parts, road, i, lane));

    let mut decision = LaneDecision::Stay;
    if allow_lane_change {
        let mut best = me.driver.threshold;
        for (dir, target) in
            [(LaneDecision::Left, road.left_of(lane)), (LaneDecision::Right, road.right_of(lane))]
        {
            if let Some(target) = target {
                if let Some(inc) = change_incentive(parts, road, i, lane, target) {
                    if inc > best {
                        best = inc;
                        decision = dir;
                    }
                }
            }
        }
    }
    Reaction { accel, decision }
}

/// Progress of an in-flight constant-duration lane-change spline.
///
/// Lateral position follows `y(t) = y0 + dy*(t/T - sin(2*pi*t/T)/(2*pi))`,
/// which starts and ends with zero lateral speed.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LaneChangeProgress {
    pub from_y: f64,
    pub to_y: f64,
    pub elapsed: f64,
    pub duration: f64,
}

impl LaneChangeProgress {
    pub fn new(from_y: f64, to_y: f64) -> Self {
        Self { from_y, to_y, elapsed: 0.0, duration: LANE_CHANGE_DURATION }
    }

    pub fn y_at(&self, t: f64) -> f64 {
        if t >= self.duration {
            return self.to_y;
        }
        let s = t.max(0.0) / self.duration;
        self.from_y
            + (self.to_y - self.from_y) * (s - (std::f64::consts::TAU * s).sin() / std::f64::consts::TAU)
    }

    pub fn lateral_speed_at(&self, t: f64) -> f64 {
        if !(0.0..self.duration).contains(&t) {
            return 0.0;
        }
        (self.to_y - self.from_y) / self.duration
            * (1.0 - (std::f64::consts::TAU * t / self.duration).cos())
    }
}

/// One simulated non-ego vehicle.
#[derive(Clone, Debug)]
pub struct TrafficVehicle {
    pub x: f64,
    pub y: f64,
    /// Longitudinal speed (m/s) — the car-following state.
    pub v_lon: f64,
    pub geometry: VehicleGeometry,
    pub driver: DriverParams,
    /// Ranges the driver was sampled from (used when recycling).
    pub ranges: DriverParamRanges,
    pub stationary: bool,
    pub lane_change: Option<LaneChangeProgress>,
    /// Seconds left before another lane change may start.
    pub cooldown: f64,
    /// Acceleration applied on the last step (diagnostics/traces).
    pub last_accel: f64,
}

impl TrafficVehicle {
    pub fn lateral_speed(&self) -> f64 {
        self.lane_change.map_or(0.0, |lc| lc.lateral_speed_at(lc.elapsed))
    }

    /// Full kinematic state; heading follows the velocity direction.
    pub fn state(&self) -> VehicleState {
        let vy = self.lateral_speed();
        VehicleState::new(self.x, self.y, vy.atan2(self.v_lon), self.v_lon.hypot(vy))
    }

    /// Lane this vehicle is steering toward.
    pub fn control_lane(&self, road: &RoadGeometry) -> usize {
        match &self.lane_change {
            Some(lc) => road.nearest_lane(lc.to_y),
            None => road.nearest_lane(self.y),
        }
    }

    pub fn participant(&self, road: &RoadGeometry) -> Participant {
        Participant {
            x: self.x,
            y: self.y,
            v: self.v_lon,
            half_length: self.geometry.half_length(),
            width: self.geometry.width,
            control_lane: self.control_lane(road),
            stationary: self.stationary,
            driver: self.driver,
        }
    }
}

/// Longitudinal speed component of a full kinematic state.
pub fn longitudinal_speed(state: &VehicleState) -> f64 {
    state.v * state.psi.cos()
}

/// Participant view of the ego vehicle. Others assume nominal parameters
/// for it when estimating its reactions.
pub fn ego_participant(state: &VehicleState, geom: &VehicleGeometry, road: &RoadGeometry) -> Participant {
    Participant {
        x: state.x,
        y: state.y,
        v: longitudinal_speed(state),
        half_length: geom.half_length(),
        width: geom.width,
        control_lane: road.nearest_lane(state.y),
        stationary: false,
        driver: DriverParams::nominal(),
    }
}

/// Advance one vehicle by `dt` given its computed reaction: kinematic
/// point update longitudinally (never reversing), spline progress or
/// spline start laterally. Shared by the simulator and the predictor.
pub fn advance_vehicle(veh: &mut TrafficVehicle, reaction: Reaction, road: &RoadGeometry, dt: f64) {
    if veh.stationary {
        veh.last_accel = 0.0;
        return;
    }
    let a = reaction.accel;
    veh.x += (veh.v_lon * dt + 0.5 * a * dt * dt).max(0.0);
    veh.v_lon = (veh.v_lon + a * dt).max(0.0);
    veh.last_accel = a;

    if let Some(mut lc) = veh.lane_change {
        lc.elapsed += dt;
        if lc.elapsed >= lc.duration {
            veh.y = lc.to_y;
            veh.lane_change = None;
            veh.cooldown = LANE_CHANGE_COOLDOWN;
        } else {
            veh.y = lc.y_at(lc.elapsed);
            veh.lane_change = Some(lc);
        }
    } else {
        veh.cooldown = (veh.cooldown - dt).max(0.0);
        let target = match reaction.decision {
            LaneDecision::Stay => None,
            LaneDecision::Left => road.left_of(road.nearest_lane(veh.y)),
            LaneDecision::Right => road.right_of(road.nearest_lane(veh.y)),
        };
        if let Some(target) = target {
            veh.lane_change = Some(LaneChangeProgress::new(veh.y, road.center(target)));
        }
    }
}

/// Recycle vehicles that drive past `x_high` back upstream of the pack in
/// their lane with freshly sampled parameters (batch-mode traffic only).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecycleRegion {
    pub x_low: f64,
    pub x_high: f64,
}

/// Complete simulation state. The ego is carried for other vehicles to
/// react to but is only ever moved by its external controller.
#[derive(Clone, Debug)]
pub struct WorldState {
    pub step: i64,
    pub road: RoadGeometry,
    pub ego: VehicleState,
    pub ego_geometry: VehicleGeometry,
    pub vehicles: Vec<TrafficVehicle>,
    pub recycle: Option<RecycleRegion>,
    rng: ChaCha8Rng,
}

impl WorldState {
    /// Instantiate a scenario: per-vehicle driver parameters are sampled
    /// from their ranges using the scenario seed.
    pub fn from_scenario(sc: &Scenario) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
        let vehicles = sc
            .others
            .iter()
            .map(|o| TrafficVehicle {
                x: o.state.x,
                y: o.state.y,
                v_lon: longitudinal_speed(&o.state),
                geometry: o.geometry,
                driver: sample_driver_params(&mut rng, &o.driver),
                ranges: o.driver,
                stationary: o.stationary,
                lane_change: None,
                cooldown: 0.0,
                last_accel: 0.0,
            })
            .collect();
        Self {
            step: 0,
            road: sc.road.clone(),
            ego: sc.ego,
            ego_geometry: sc.ego_geometry,
            vehicles,
            recycle: None,
            rng,
        }
    }

    /// Flat participant list: ego first, then vehicles in order.
    pub fn participants(&self) -> Vec<Participant> {
        let mut parts = Vec::with_capacity(self.vehicles.len() + 1);
        parts.push(ego_participant(&self.ego, &self.ego_geometry, &self.road));
        parts.extend(self.vehicles.iter().map(|v| v.participant(&self.road)));
        parts
    }
}

/// Advance all non-ego vehicles by one step of `dt` seconds. Reactions are
/// computed synchronously against the pre-step snapshot, then applied.
pub fn step(world: &mut WorldState, dt: f64) {
    let parts = world.participants();
    let reactions: Vec<Reaction> = world
        .vehicles
        .iter()
        .enumerate()
        .map(|(n, v)| {
            let allow = !v.stationary && v.lane_change.is_none() && v.cooldown <= 0.0;
            participant_reaction(&world.road, &parts, n + 1, allow)
        })
        .collect();
    for (veh, reaction) in world.vehicles.iter_mut().zip(reactions) {
        advance_vehicle(veh, reaction, &world.road, dt);
    }

    if let Some(region) = world.recycle {
        recycle_pass(world, region);
    }
    world.step += 1;
}

fn recycle_pass(world: &mut WorldState, region: RecycleRegion) {
    for i in 0..world.vehicles.len() {
        if world.vehicles[i].stationary || world.vehicles[i].x <= region.x_high {
            continue;
        }
        let lane = world.road.nearest_lane(world.vehicles[i].y);
        // Rearmost same-lane occupant (the recycled vehicle excluded).
        let rear = world
            .vehicles
            .iter()
            .enumerate()
            .filter(|(j, v)| *j != i && world.road.nearest_lane(v.y) == lane)
            .map(|(_, v)| v.x - v.geometry.half_length())
            .fold(f64::INFINITY, f64::min);
        let gap = world.rng.gen_range(15.0..30.0);
        let driver = sample_driver_params(&mut world.rng, &world.vehicles[i].ranges);
        let veh = &mut world.vehicles[i];
        let front = if rear.is_finite() { rear } else { region.x_high };
        veh.x = (front - gap - veh.geometry.half_length()).max(region.x_low);
        veh.y = world.road.center(lane);
        veh.v_lon = veh.v_lon.min(driver.v0);
        veh.driver = driver;
        veh.lane_change = None;
        veh.cooldown = 0.0;
    }
}

/// Reaction the ego itself would have under the same driver model (used by
/// the rule-based baseline policy). `control_lane` overrides the steering
/// lane while the ego is mid-change.
pub fn ego_reaction(
    world: &WorldState,
    driver: &DriverParams,
    allow_lane_change: bool,
    control_lane: Option<usize>,
) -> Reaction {
    let mut parts = world.participants();
    parts[0].driver = *driver;
    if let Some(lane) = control_lane {
        parts[0].control_lane = lane;
    }
    participant_reaction(&world.road, &parts, 0, allow_lane_change)
}
