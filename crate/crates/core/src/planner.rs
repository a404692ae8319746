//! Receding-horizon trajectory smoothing with certified obstacle
//! clearance.
//!
//! Each control step solves one NLP: track the decision reference with a
//! kinematic bicycle over an `M`-step horizon while keeping a minimum
//! distance to every nearby predicted vehicle footprint. Clearance is not
//! enforced through a nonsmooth distance function; instead the dual
//! multipliers of each rectangle pair are decision variables and the
//! separation conditions of [`crate::occupancy`] enter as smooth
//! constraints, so a converged solve carries a certificate per obstacle
//! and step.
//!
//! The decision vector is `[u_0 .. u_{M-1} | block .. block]` with one
//! 10-entry dual block `(lambda, mu, rho)` per (obstacle, step). Every
//! constraint row touches the controls and at most one block, matching
//! the block-arrow layout the NLP solver can eliminate cheaply.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, Matrix4, Matrix4x2, Matrix4xX, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::geometry::VehicleGeometry;
use crate::limits::MotionLimits;
use crate::nlp::{self, NlpOptions, NlpProblem, SolveStatus};
use crate::occupancy::{footprint, occupancy_polytope, rect_distance, DualCertificate};
use crate::predict::{PredictionResult, WorldSnapshot};
use crate::state::{ControlInput, Trajectory, VehicleState};

/// Slip angle of the kinematic bicycle for a front steering angle.
pub fn slip_angle(delta: f64, geom: &VehicleGeometry) -> f64 {
    (geom.lr / (geom.lf + geom.lr) * delta.tan()).atan()
}

/// One forward-Euler step of the kinematic bicycle model.
///
/// Speed saturates at zero: braking cannot push the model into reverse.
pub fn kinematic_step(
    s: &VehicleState,
    u: &ControlInput,
    dt: f64,
    geom: &VehicleGeometry,
) -> VehicleState {
    let beta = slip_angle(u.delta, geom);
    let (sh, ch) = (s.psi + beta).sin_cos();
    VehicleState::new(
        s.x + dt * s.v * ch,
        s.y + dt * s.v * sh,
        s.psi + dt * s.v / geom.lr * beta.sin(),
        (s.v + dt * u.a).max(0.0),
    )
}

/// State at `step`, extending past either end of the trajectory with
/// constant speed and heading when it does not cover that step.
pub fn state_or_extrapolate(traj: &Trajectory, step: i64) -> VehicleState {
    if let Some(s) = traj.at_step(step) {
        return s;
    }
    let (anchor, gap) = if step < traj.start_step() {
        (traj.first(), (step - traj.start_step()) as f64 * traj.dt())
    } else {
        (traj.last(), (step - traj.end_step()) as f64 * traj.dt())
    };
    let (vx, vy) = anchor.velocity();
    VehicleState::new(anchor.x + gap * vx, anchor.y + gap * vy, anchor.psi, anchor.v)
}

/// A predicted vehicle the planner must clear: its trajectory plus the
/// footprint dimensions.
#[derive(Clone, Debug)]
pub struct ObstaclePrediction {
    pub trajectory: Trajectory,
    pub geometry: VehicleGeometry,
}

impl ObstaclePrediction {
    /// Pair each predicted trajectory with the geometry of the vehicle it
    /// belongs to (trajectories are indexed like the snapshot's vehicles).
    pub fn zip(snapshot: &WorldSnapshot, prediction: &PredictionResult) -> Vec<Self> {
        assert_eq!(
            snapshot.vehicles.len(),
            prediction.trajectories.len(),
            "one prediction per observed vehicle"
        );
        snapshot
            .vehicles
            .iter()
            .zip(&prediction.trajectories)
            .map(|(v, t)| Self { trajectory: t.clone(), geometry: v.geometry })
            .collect()
    }
}

/// Tracking weights and horizon of the per-step NLP.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Horizon length M (steps).
    pub horizon: usize,
    /// Control period (s); must match the reference sampling.
    pub dt: f64,
    /// State tracking weights on (x, y, psi, v).
    pub q_tau: [f64; 4],
    /// Control magnitude weights on (a, delta).
    pub q_u: [f64; 2],
    /// Control rate weights on (a, delta).
    pub q_du: [f64; 2],
    /// Required clearance between footprints (m).
    pub d_min: f64,
    /// Obstacles further ahead/behind than this are not constrained (m).
    pub prune_distance: f64,
    /// At most this many nearest obstacles enter the problem.
    pub max_obstacles: usize,
    /// NLP convergence tolerance.
    pub tol: f64,
    /// NLP iteration cap per control step.
    pub max_iter: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.1,
            q_tau: [1.0, 10.0, 10.0, 1.0],
            q_u: [0.5, 5.0],
            q_du: [1.0, 20.0],
            d_min: 0.3,
            prune_distance: 60.0,
            max_obstacles: 5,
            tol: 1e-6,
            max_iter: 120,
        }
    }
}

/// Cold-start value for the separation duals.
const DUAL_COLD: f64 = 0.05;
/// Entries of a dual block: 4 lambda + 4 mu + 2 rho.
const BLOCK_LEN: usize = 10;

/// Outcome of one control step.
#[derive(Clone, Debug)]
pub struct PlanStepResult {
    /// Absolute time step the control was planned at.
    pub step: i64,
    pub applied: ControlInput,
    /// Model rollout under the planned controls, starting at the current
    /// state (`horizon + 1` samples).
    pub planned: Trajectory,
    pub status: SolveStatus,
    /// Whether the braking fallback replaced the solver's answer.
    pub fallback: bool,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub solve_seconds: f64,
    /// Separation certificates per constrained obstacle (empty on
    /// fallback). Multipliers live in a frame translated to the current
    /// position; margins are translation-invariant once the link
    /// equalities hold, so they certify world-frame clearance as well.
    pub duals: Vec<ObstacleDuals>,
    /// Smallest footprint distance between the planned states and the
    /// constrained obstacles over the horizon (infinite when none).
    pub min_planned_distance: f64,
    /// Indices (into the caller's obstacle slice) that were constrained.
    pub constrained: Vec<usize>,
}

/// Separation duals for one obstacle, one entry per horizon step `1..=M`.
#[derive(Clone, Debug)]
pub struct ObstacleDuals {
    pub obstacle: usize,
    pub per_step: Vec<DualCertificate>,
}

/// Receding-horizon tracker. Owns the previously applied control (the
/// anchor of the first rate penalty and rate constraint) and the previous
/// solution for warm starts.
#[derive(Debug)]
pub struct MpcController {
    cfg: MpcConfig,
    limits: MotionLimits,
    geom: VehicleGeometry,
    prev_u: ControlInput,
    warm: Option<Warm>,
}

#[derive(Debug)]
struct Warm {
    controls: Vec<f64>,
    /// Per constrained obstacle: its index and the M dual blocks.
    dual_blocks: Vec<(usize, Vec<[f64; BLOCK_LEN]>)>,
}

impl MpcController {
    pub fn new(cfg: MpcConfig, limits: MotionLimits, geom: VehicleGeometry) -> Self {
        assert!(cfg.horizon >= 1, "horizon must be at least one step");
        assert!(cfg.dt > 0.0 && cfg.dt.is_finite());
        Self { cfg, limits, geom, prev_u: ControlInput::default(), warm: None }
    }

    /// Anchor for the first control-rate penalty and constraint.
    pub fn set_previous_control(&mut self, u: ControlInput) {
        self.prev_u = u;
    }

    pub fn previous_control(&self) -> ControlInput {
        self.prev_u
    }

    /// Forget the previous solution (e.g. after teleporting the state in
    /// tests). The previous control is kept: rate limits still apply.
    pub fn reset_warm_start(&mut self) {
        self.warm = None;
    }

    /// Plan at step `k` from the current state and apply the first
    /// control. Returns the applied control together with the planned
    /// rollout, solver diagnostics, and the separation certificates.
    pub fn step(
        &mut self,
        k: i64,
        current: &VehicleState,
        reference: &Trajectory,
        obstacles: &[ObstaclePrediction],
    ) -> PlanStepResult {
        let m = self.cfg.horizon;
        let constrained = self.constrained_set(k, current, obstacles);
        let picked: Vec<&ObstaclePrediction> =
            constrained.iter().map(|&i| &obstacles[i]).collect();

        let data = Arc::new(MpcData::new(
            k,
            current,
            reference,
            &picked,
            self.prev_u,
            &self.limits,
            &self.geom,
            &self.cfg,
        ));
        let mut problem = assemble(data.clone());
        if let Some(z0) = self.warm_start_guess(&data, &constrained) {
            problem = problem.with_initial_guess(z0);
        }

        let opts = NlpOptions {
            tol: self.cfg.tol,
            max_iter: self.cfg.max_iter,
            ..NlpOptions::default()
        };
        let t0 = Instant::now();
        let sol = nlp::solve(&problem, &opts);
        let solve_seconds = t0.elapsed().as_secs_f64();

        // A converged solve is applied as-is; a capped one only if its
        // independent residuals are nearly there. Anything else brakes.
        let accept = sol.z.iter().all(|v| v.is_finite())
            && match sol.status {
                SolveStatus::OptimalLocal => true,
                SolveStatus::MaxIter => sol.residuals.max() <= 100.0 * self.cfg.tol,
                SolveStatus::InfeasibleDetected | SolveStatus::NumericFailure => false,
            };

        let (applied, fallback) = if accept {
            (ControlInput::new(sol.z[0], sol.z[1]), false)
        } else {
            (self.fallback_control(current), true)
        };
        let applied = self.checked_control(applied);

        // Roll the model forward under the plan (or under a continued
        // braking ramp when falling back).
        let mut states = Vec::with_capacity(m + 1);
        states.push(*current);
        let mut st = *current;
        if accept {
            for i in 0..m {
                let u = ControlInput::new(sol.z[2 * i], sol.z[2 * i + 1]);
                st = kinematic_step(&st, &u, self.cfg.dt, &self.geom);
                states.push(st);
            }
        } else {
            let mut u = applied;
            for _ in 0..m {
                st = kinematic_step(&st, &u, self.cfg.dt, &self.geom);
                states.push(st);
                u = ControlInput::new(
                    (u.a + self.limits.da.min).max(self.limits.a.min),
                    u.delta,
                );
            }
        }
        let planned = Trajectory::new(k, self.cfg.dt, states);

        let mut duals = Vec::new();
        if accept {
            for (bn, &obs) in constrained.iter().enumerate() {
                let mut per_step = Vec::with_capacity(m);
                for i in 0..m {
                    let off = 2 * m + BLOCK_LEN * (bn * m + i);
                    per_step.push(DualCertificate {
                        lambda: Vector4::new(
                            sol.z[off],
                            sol.z[off + 1],
                            sol.z[off + 2],
                            sol.z[off + 3],
                        ),
                        mu: Vector4::new(
                            sol.z[off + 4],
                            sol.z[off + 5],
                            sol.z[off + 6],
                            sol.z[off + 7],
                        ),
                        rho: Vector2::new(sol.z[off + 8], sol.z[off + 9]),
                    });
                }
                duals.push(ObstacleDuals { obstacle: obs, per_step });
            }
        }

        let mut min_planned_distance = f64::INFINITY;
        for i in 1..=m {
            let ego = footprint(&planned.state(i), &self.geom);
            for &obs in &constrained {
                let o = &obstacles[obs];
                let os = state_or_extrapolate(&o.trajectory, k + i as i64);
                let d = rect_distance(&ego, &footprint(&os, &o.geometry));
                min_planned_distance = min_planned_distance.min(d);
            }
        }

        self.prev_u = applied;
        self.warm = accept.then(|| Warm {
            controls: sol.z[..2 * m].to_vec(),
            dual_blocks: constrained
                .iter()
                .enumerate()
                .map(|(bn, &obs)| {
                    let blocks = (0..m)
                        .map(|i| {
                            let off = 2 * m + BLOCK_LEN * (bn * m + i);
                            let mut b = [0.0; BLOCK_LEN];
                            b.copy_from_slice(&sol.z[off..off + BLOCK_LEN]);
                            b
                        })
                        .collect();
                    (obs, blocks)
                })
                .collect(),
        });

        PlanStepResult {
            step: k,
            applied,
            planned,
            status: sol.status,
            fallback,
            objective: sol.objective,
            kkt_residual: sol.residuals.max(),
            iterations: sol.iterations,
            solve_seconds,
            duals,
            min_planned_distance,
            constrained,
        }
    }

    /// Nearest obstacles by current longitudinal gap, in index order.
    fn constrained_set(
        &self,
        k: i64,
        current: &VehicleState,
        obstacles: &[ObstaclePrediction],
    ) -> Vec<usize> {
        let mut near: Vec<(f64, usize)> = obstacles
            .iter()
            .enumerate()
            .filter_map(|(idx, o)| {
                let s = state_or_extrapolate(&o.trajectory, k);
                let dx = (s.x - current.x).abs();
                (dx <= self.cfg.prune_distance).then_some((dx, idx))
            })
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        near.truncate(self.cfg.max_obstacles);
        let mut picked: Vec<usize> = near.into_iter().map(|(_, i)| i).collect();
        picked.sort_unstable();
        picked
    }

    /// Shift the previous solution one step forward onto the new layout.
    fn warm_start_guess(&self, data: &MpcData, constrained: &[usize]) -> Option<Vec<f64>> {
        let w = self.warm.as_ref()?;
        let m = data.m;
        if w.controls.len() != 2 * m {
            return None;
        }
        let mut z0 = data.cold_start();
        for i in 0..m {
            let src = 2 * (i + 1).min(m - 1);
            z0[2 * i] = w.controls[src];
            z0[2 * i + 1] = w.controls[src + 1];
        }
        for (bn, &obs) in constrained.iter().enumerate() {
            if let Some((_, steps)) = w.dual_blocks.iter().find(|(o, _)| *o == obs) {
                for i in 0..m {
                    let src = &steps[(i + 1).min(m - 1)];
                    let off = 2 * m + BLOCK_LEN * (bn * m + i);
                    z0[off..off + BLOCK_LEN].copy_from_slice(src);
                }
            }
        }
        Some(z0)
    }

    /// Brake as hard as the rate limits allow while holding the steering.
    fn fallback_control(&self, current: &VehicleState) -> ControlInput {
        let lo = (self.prev_u.a + self.limits.da.min).max(self.limits.a.min);
        let hi = (self.prev_u.a + self.limits.da.max).min(self.limits.a.max);
        let delta = self.prev_u.delta.clamp(self.limits.delta.min, self.limits.delta.max);
        // Brake as hard as the rate corridor allows; once stopped, relax the
        // command back toward zero instead (the vehicle stays put either way,
        // and a lingering full-brake command would force the next problem's
        // first-step speed below zero, leaving it infeasible forever).
        let target = if current.v > 0.0 { self.limits.a.min } else { 0.0 };
        ControlInput::new(target.clamp(lo, hi), delta)
    }

    /// Enforce the control box and rate bounds on whatever is applied:
    /// assert they hold up to solver tolerance, then snap exactly.
    fn checked_control(&self, u: ControlInput) -> ControlInput {
        let tol = 1e-6;
        let l = &self.limits;
        assert!(
            u.a >= l.a.min - tol && u.a <= l.a.max + tol,
            "applied acceleration {} outside [{}, {}]",
            u.a,
            l.a.min,
            l.a.max
        );
        assert!(
            u.delta >= l.delta.min - tol && u.delta <= l.delta.max + tol,
            "applied steering {} outside [{}, {}]",
            u.delta,
            l.delta.min,
            l.delta.max
        );
        let da = u.a - self.prev_u.a;
        let dd = u.delta - self.prev_u.delta;
        assert!(
            da >= l.da.min - tol && da <= l.da.max + tol,
            "acceleration rate {da} outside [{}, {}]",
            l.da.min,
            l.da.max
        );
        assert!(
            dd >= l.ddelta.min - tol && dd <= l.ddelta.max + tol,
            "steering rate {dd} outside [{}, {}]",
            l.ddelta.min,
            l.ddelta.max
        );
        let a = u
            .a
            .clamp(self.prev_u.a + l.da.min, self.prev_u.a + l.da.max)
            .clamp(l.a.min, l.a.max);
        let delta = u
            .delta
            .clamp(self.prev_u.delta + l.ddelta.min, self.prev_u.delta + l.ddelta.max)
            .clamp(l.delta.min, l.delta.max);
        ControlInput::new(a, delta)
    }
}

/// Execution of a full reference: repeated one-step planning.
#[derive(Clone, Debug)]
pub struct HorizonPlan {
    /// The state sequence actually driven (one more sample than controls).
    pub executed: Trajectory,
    pub controls: Vec<ControlInput>,
    pub steps: Vec<PlanStepResult>,
}

/// Track `reference` to its end, re-planning every step. Plans at each
/// step `k` from the executed state, so the final plan still has a full
/// horizon of reference left (extrapolated if needed).
pub fn plan_horizon(
    reference: &Trajectory,
    obstacles: &[ObstaclePrediction],
    start: &VehicleState,
    prev_u: ControlInput,
    limits: &MotionLimits,
    geom: &VehicleGeometry,
    cfg: &MpcConfig,
) -> HorizonPlan {
    assert!(
        reference.len() > cfg.horizon,
        "reference must cover at least one full horizon"
    );
    let mut ctl = MpcController::new(*cfg, *limits, *geom);
    ctl.set_previous_control(prev_u);
    let k0 = reference.start_step();
    let last = k0 + (reference.len() - 1 - cfg.horizon) as i64;
    let mut state = *start;
    let mut states = vec![state];
    let mut controls = Vec::new();
    let mut steps = Vec::new();
    for k in k0..=last {
        let r = ctl.step(k, &state, reference, obstacles);
        state = kinematic_step(&state, &r.applied, cfg.dt, geom);
        states.push(state);
        controls.push(r.applied);
        steps.push(r);
    }
    HorizonPlan { executed: Trajectory::new(k0, cfg.dt, states), controls, steps }
}

/// Build the per-step NLP. Exposed for derivative checks and structure
/// tests; [`MpcController::step`] is the normal entry point.
#[allow(clippy::too_many_arguments)]
pub fn build_mpc_problem(
    k: i64,
    start: &VehicleState,
    reference: &Trajectory,
    obstacles: &[&ObstaclePrediction],
    prev_u: ControlInput,
    limits: &MotionLimits,
    geom: &VehicleGeometry,
    cfg: &MpcConfig,
) -> NlpProblem {
    assemble(Arc::new(MpcData::new(k, start, reference, obstacles, prev_u, limits, geom, cfg)))
}

fn assemble(data: Arc<MpcData>) -> NlpProblem {
    let (lower, upper) = data.variable_bounds();
    let z0 = data.cold_start();
    let (d1, d2, d3, d4, d5, d6) = (
        data.clone(),
        data.clone(),
        data.clone(),
        data.clone(),
        data.clone(),
        data.clone(),
    );
    let mut p = NlpProblem::new(z0, move |z| d1.objective(z), move |z| d2.gradient(z))
        .with_bounds(lower, upper)
        .with_equalities(data.m_eq, move |z| d3.equalities(z), move |z| d4.eq_jacobian(z))
        .with_inequalities(data.m_ineq, move |z| d5.inequalities(z), move |z| d6.ineq_jacobian(z));
    if !data.blocks.is_empty() {
        p = p.with_block_structure(data.n_head, BLOCK_LEN);
    }
    p
}

/// One (obstacle, step) clearance constraint: the obstacle's fixed
/// polytope at that step, in the problem frame.
struct BlockData {
    /// Horizon step `1..=M` the block constrains.
    step: usize,
    a_obs: Matrix4x2<f64>,
    b_obs: Vector4<f64>,
}

/// Everything the NLP callbacks need, immutable and shared. The whole
/// problem lives in a frame translated by the current position, keeping
/// polytope offsets horizon-sized regardless of how far the episode has
/// driven.
struct MpcData {
    m: usize,
    dt: f64,
    /// Rear-axle share of the wheelbase, `lr / (lf + lr)`.
    kappa: f64,
    lr: f64,
    start: Vector4<f64>,
    /// Tracking targets for steps `1..=M`.
    refs: Vec<Vector4<f64>>,
    q_tau: [f64; 4],
    q_u: [f64; 2],
    q_du: [f64; 2],
    prev_u: [f64; 2],
    blocks: Vec<BlockData>,
    /// Ego polytope offsets at the origin: half extents per face.
    h_ego: Vector4<f64>,
    d_min: f64,
    a_box: (f64, f64),
    delta_box: (f64, f64),
    da: (f64, f64),
    ddelta: (f64, f64),
    /// Per-step state envelope rows: (state component, bound, is_upper).
    state_rows: Vec<(usize, f64, bool)>,
    n: usize,
    n_head: usize,
    m_eq: usize,
    m_ineq: usize,
}

impl MpcData {
    #[allow(clippy::too_many_arguments)]
    fn new(
        k: i64,
        start: &VehicleState,
        reference: &Trajectory,
        obstacles: &[&ObstaclePrediction],
        prev_u: ControlInput,
        limits: &MotionLimits,
        geom: &VehicleGeometry,
        cfg: &MpcConfig,
    ) -> Self {
        assert!(
            (reference.dt() - cfg.dt).abs() <= 1e-9,
            "reference sampled at {} s but the controller runs at {} s",
            reference.dt(),
            cfg.dt
        );
        let m = cfg.horizon;
        let (ox, oy) = (start.x, start.y);

        let refs = (1..=m as i64)
            .map(|i| {
                let s = state_or_extrapolate(reference, k + i);
                Vector4::new(s.x - ox, s.y - oy, s.psi, s.v)
            })
            .collect();

        let mut blocks = Vec::with_capacity(obstacles.len() * m);
        for o in obstacles {
            assert!(
                (o.trajectory.dt() - cfg.dt).abs() <= 1e-9,
                "obstacle prediction sampled at {} s but the controller runs at {} s",
                o.trajectory.dt(),
                cfg.dt
            );
            for i in 1..=m {
                let s = state_or_extrapolate(&o.trajectory, k + i as i64);
                let shifted = VehicleState::new(s.x - ox, s.y - oy, s.psi, s.v);
                let p = occupancy_polytope(&shifted, &o.geometry);
                blocks.push(BlockData { step: i, a_obs: p.a, b_obs: p.b });
            }
        }

        let mut state_rows = Vec::new();
        let envelope = [
            (1, limits.y.min - oy, limits.y.max - oy),
            (2, limits.psi.min, limits.psi.max),
            (3, limits.v.min, limits.v.max),
        ];
        for (comp, lo, hi) in envelope {
            if lo > -1e8 {
                state_rows.push((comp, lo, false));
            }
            if hi < 1e8 {
                state_rows.push((comp, hi, true));
            }
        }

        let n_head = 2 * m;
        let n = n_head + BLOCK_LEN * blocks.len();
        let m_eq = 4 * blocks.len();
        let m_ineq = 2 * blocks.len() + 4 * m + state_rows.len() * m;
        let (hl, hw) = (geom.half_length(), geom.half_width());
        Self {
            m,
            dt: cfg.dt,
            kappa: geom.lr / (geom.lf + geom.lr),
            lr: geom.lr,
            start: Vector4::new(0.0, 0.0, start.psi, start.v),
            refs,
            q_tau: cfg.q_tau,
            q_u: cfg.q_u,
            q_du: cfg.q_du,
            prev_u: [prev_u.a, prev_u.delta],
            blocks,
            h_ego: Vector4::new(hl, hw, hl, hw),
            d_min: cfg.d_min,
            a_box: (limits.a.min, limits.a.max),
            delta_box: (limits.delta.min, limits.delta.max),
            da: (limits.da.min, limits.da.max),
            ddelta: (limits.ddelta.min, limits.ddelta.max),
            state_rows,
            n,
            n_head,
            m_eq,
            m_ineq,
        }
    }

    fn variable_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lower = vec![f64::NEG_INFINITY; self.n];
        let mut upper = vec![f64::INFINITY; self.n];
        for i in 0..self.m {
            lower[2 * i] = self.a_box.0;
            upper[2 * i] = self.a_box.1;
            lower[2 * i + 1] = self.delta_box.0;
            upper[2 * i + 1] = self.delta_box.1;
        }
        for b in 0..self.blocks.len() {
            let off = self.n_head + BLOCK_LEN * b;
            for j in 0..8 {
                lower[off + j] = 0.0;
            }
        }
        (lower, upper)
    }

    fn cold_start(&self) -> Vec<f64> {
        let mut z0 = vec![0.0; self.n];
        for b in 0..self.blocks.len() {
            let off = self.n_head + BLOCK_LEN * b;
            for j in 0..8 {
                z0[off + j] = DUAL_COLD;
            }
        }
        z0
    }

    /// Roll the model over the horizon; index 0 is the fixed start.
    fn rollout(&self, z: &[f64]) -> Vec<Vector4<f64>> {
        let mut states = Vec::with_capacity(self.m + 1);
        let mut s = self.start;
        states.push(s);
        for i in 0..self.m {
            s = self.step4(&s, z[2 * i], z[2 * i + 1]).0;
            states.push(s);
        }
        states
    }

    /// Rollout plus the sensitivity of each state to the stacked controls
    /// (`sens[i - 1]` is the 4 x 2M Jacobian of state `i`; only its first
    /// `2i` columns can be nonzero).
    fn rollout_sens(&self, z: &[f64]) -> (Vec<Vector4<f64>>, Vec<Matrix4xX<f64>>) {
        let nu = 2 * self.m;
        let mut states = Vec::with_capacity(self.m + 1);
        let mut sens = Vec::with_capacity(self.m);
        let mut s = self.start;
        states.push(s);
        let mut sm = Matrix4xX::<f64>::zeros(nu);
        for i in 0..self.m {
            let (next, fx, fu) = self.step4(&s, z[2 * i], z[2 * i + 1]);
            let mut nm = fx * &sm;
            for r in 0..4 {
                nm[(r, 2 * i)] += fu[(r, 0)];
                nm[(r, 2 * i + 1)] += fu[(r, 1)];
            }
            sm = nm;
            s = next;
            states.push(s);
            sens.push(sm.clone());
        }
        (states, sens)
    }

    /// One model step with its Jacobians w.r.t. state and control.
    fn step4(&self, s: &Vector4<f64>, a: f64, delta: f64) -> (Vector4<f64>, Matrix4<f64>, Matrix4x2<f64>) {
        let t = delta.tan();
        let beta = (self.kappa * t).atan();
        let dbeta = self.kappa * (1.0 + t * t) / (1.0 + (self.kappa * t).powi(2));
        let (sb, cb) = beta.sin_cos();
        let (sh, ch) = (s[2] + beta).sin_cos();
        let (v, dt) = (s[3], self.dt);
        // The planning model is deliberately smooth: reverse speeds are cut
        // off by the speed envelope rows (linear in the controls), not by a
        // saturation inside the dynamics, which would put a derivative kink
        // exactly where stop-and-hold plans live.
        let next = Vector4::new(
            s[0] + dt * v * ch,
            s[1] + dt * v * sh,
            s[2] + dt * v / self.lr * sb,
            v + dt * a,
        );
        #[rustfmt::skip]
        let fx = Matrix4::new(
            1.0, 0.0, -dt * v * sh, dt * ch,
            0.0, 1.0,  dt * v * ch, dt * sh,
            0.0, 0.0,  1.0,         dt * sb / self.lr,
            0.0, 0.0,  0.0,         1.0,
        );
        #[rustfmt::skip]
        let fu = Matrix4x2::new(
            0.0, -dt * v * sh * dbeta,
            0.0,  dt * v * ch * dbeta,
            0.0,  dt * v / self.lr * cb * dbeta,
            dt,   0.0,
        );
        (next, fx, fu)
    }

    fn objective(&self, z: &[f64]) -> f64 {
        let states = self.rollout(z);
        let mut j = 0.0;
        for i in 1..=self.m {
            let e = states[i] - self.refs[i - 1];
            for c in 0..4 {
                j += self.q_tau[c] * e[c] * e[c];
            }
        }
        for i in 0..self.m {
            let u = [z[2 * i], z[2 * i + 1]];
            let up = if i == 0 { self.prev_u } else { [z[2 * i - 2], z[2 * i - 1]] };
            for c in 0..2 {
                j += self.q_u[c] * u[c] * u[c];
                let d = u[c] - up[c];
                j += self.q_du[c] * d * d;
            }
        }
        j
    }

    fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let (states, sens) = self.rollout_sens(z);
        let mut g = vec![0.0; self.n];
        for i in 1..=self.m {
            let e = states[i] - self.refs[i - 1];
            let sm = &sens[i - 1];
            for r in 0..4 {
                let w = 2.0 * self.q_tau[r] * e[r];
                if w == 0.0 {
                    continue;
                }
                for col in 0..2 * i {
                    g[col] += w * sm[(r, col)];
                }
            }
        }
        for i in 0..self.m {
            let u = [z[2 * i], z[2 * i + 1]];
            let up = if i == 0 { self.prev_u } else { [z[2 * i - 2], z[2 * i - 1]] };
            for c in 0..2 {
                let d = u[c] - up[c];
                g[2 * i + c] += 2.0 * self.q_u[c] * u[c] + 2.0 * self.q_du[c] * d;
                if i > 0 {
                    g[2 * (i - 1) + c] -= 2.0 * self.q_du[c] * d;
                }
            }
        }
        g
    }

    fn block_vars(&self, z: &[f64], b: usize) -> (Vector4<f64>, Vector4<f64>, Vector2<f64>) {
        let off = self.n_head + BLOCK_LEN * b;
        (
            Vector4::new(z[off], z[off + 1], z[off + 2], z[off + 3]),
            Vector4::new(z[off + 4], z[off + 5], z[off + 6], z[off + 7]),
            Vector2::new(z[off + 8], z[off + 9]),
        )
    }

    /// `A(psi)' lam` for the ego polytope and its derivative in `psi`.
    fn a_t_lambda(psi: f64, lam: &Vector4<f64>) -> (Vector2<f64>, Vector2<f64>) {
        let (s, c) = psi.sin_cos();
        let d13 = lam[0] - lam[2];
        let d24 = lam[1] - lam[3];
        (
            Vector2::new(c * d13 - s * d24, s * d13 + c * d24),
            Vector2::new(-s * d13 - c * d24, c * d13 - s * d24),
        )
    }

    /// Link equalities per block: `A_ego(psi_i)' lam + rho = 0` and
    /// `A_obs' mu - rho = 0`.
    fn equalities(&self, z: &[f64]) -> Vec<f64> {
        let states = self.rollout(z);
        let mut out = vec![0.0; self.m_eq];
        for (b, blk) in self.blocks.iter().enumerate() {
            let (lam, mu, rho) = self.block_vars(z, b);
            let (w, _) = Self::a_t_lambda(states[blk.step][2], &lam);
            let e2 = blk.a_obs.transpose() * mu - rho;
            out[4 * b] = w[0] + rho[0];
            out[4 * b + 1] = w[1] + rho[1];
            out[4 * b + 2] = e2[0];
            out[4 * b + 3] = e2[1];
        }
        out
    }

    fn eq_jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let (states, sens) = self.rollout_sens(z);
        let mut jm = DMatrix::zeros(self.m_eq, self.n);
        for (b, blk) in self.blocks.iter().enumerate() {
            let off = self.n_head + BLOCK_LEN * b;
            let i = blk.step;
            let (lam, _, _) = self.block_vars(z, b);
            let psi = states[i][2];
            let (s, c) = psi.sin_cos();
            let (_, dw) = Self::a_t_lambda(psi, &lam);
            let sm = &sens[i - 1];
            for col in 0..2 * i {
                let dpsi = sm[(2, col)];
                if dpsi != 0.0 {
                    jm[(4 * b, col)] = dw[0] * dpsi;
                    jm[(4 * b + 1, col)] = dw[1] * dpsi;
                }
            }
            let at = [[c, -s, -c, s], [s, c, -s, -c]];
            for j in 0..4 {
                jm[(4 * b, off + j)] = at[0][j];
                jm[(4 * b + 1, off + j)] = at[1][j];
                jm[(4 * b + 2, off + 4 + j)] = blk.a_obs[(j, 0)];
                jm[(4 * b + 3, off + 4 + j)] = blk.a_obs[(j, 1)];
            }
            jm[(4 * b, off + 8)] = 1.0;
            jm[(4 * b + 1, off + 9)] = 1.0;
            jm[(4 * b + 2, off + 8)] = -1.0;
            jm[(4 * b + 3, off + 9)] = -1.0;
        }
        jm
    }

    /// Rows, in order: separation margin and dual-ball per block, then
    /// control rates, then the per-step state envelope.
    fn inequalities(&self, z: &[f64]) -> Vec<f64> {
        let states = self.rollout(z);
        let nb = self.blocks.len();
        let mut g = vec![0.0; self.m_ineq];
        for (b, blk) in self.blocks.iter().enumerate() {
            let (lam, mu, rho) = self.block_vars(z, b);
            let tau = &states[blk.step];
            let (w, _) = Self::a_t_lambda(tau[2], &lam);
            let b_ego = self.h_ego.dot(&lam) + w[0] * tau[0] + w[1] * tau[1];
            g[b] = -b_ego - blk.b_obs.dot(&mu) - self.d_min;
            g[nb + b] = 1.0 - rho.norm_squared();
        }
        let mut r = 2 * nb;
        for i in 0..self.m {
            let u = [z[2 * i], z[2 * i + 1]];
            let up = if i == 0 { self.prev_u } else { [z[2 * i - 2], z[2 * i - 1]] };
            g[r] = self.da.1 - (u[0] - up[0]);
            g[r + 1] = (u[0] - up[0]) - self.da.0;
            g[r + 2] = self.ddelta.1 - (u[1] - up[1]);
            g[r + 3] = (u[1] - up[1]) - self.ddelta.0;
            r += 4;
        }
        for i in 1..=self.m {
            for &(comp, bound, upper) in &self.state_rows {
                g[r] = if upper { bound - states[i][comp] } else { states[i][comp] - bound };
                r += 1;
            }
        }
        g
    }

    fn ineq_jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let (states, sens) = self.rollout_sens(z);
        let nb = self.blocks.len();
        let mut jm = DMatrix::zeros(self.m_ineq, self.n);
        for (b, blk) in self.blocks.iter().enumerate() {
            let off = self.n_head + BLOCK_LEN * b;
            let i = blk.step;
            let (lam, _, rho) = self.block_vars(z, b);
            let tau = &states[i];
            let psi = tau[2];
            let (s, c) = psi.sin_cos();
            let (w, dw) = Self::a_t_lambda(psi, &lam);
            let dpsi_p = dw[0] * tau[0] + dw[1] * tau[1];
            let sm = &sens[i - 1];
            for col in 0..2 * i {
                jm[(b, col)] =
                    -(w[0] * sm[(0, col)] + w[1] * sm[(1, col)] + dpsi_p * sm[(2, col)]);
            }
            // A(psi) p per face, for the lambda columns of the margin.
            let ap = [
                c * tau[0] + s * tau[1],
                -s * tau[0] + c * tau[1],
                -c * tau[0] - s * tau[1],
                s * tau[0] - c * tau[1],
            ];
            for j in 0..4 {
                jm[(b, off + j)] = -(self.h_ego[j] + ap[j]);
                jm[(b, off + 4 + j)] = -blk.b_obs[j];
            }
            jm[(nb + b, off + 8)] = -2.0 * rho[0];
            jm[(nb + b, off + 9)] = -2.0 * rho[1];
        }
        let mut r = 2 * nb;
        for i in 0..self.m {
            jm[(r, 2 * i)] = -1.0;
            jm[(r + 1, 2 * i)] = 1.0;
            jm[(r + 2, 2 * i + 1)] = -1.0;
            jm[(r + 3, 2 * i + 1)] = 1.0;
            if i > 0 {
                jm[(r, 2 * i - 2)] = 1.0;
                jm[(r + 1, 2 * i - 2)] = -1.0;
                jm[(r + 2, 2 * i - 1)] = 1.0;
                jm[(r + 3, 2 * i - 1)] = -1.0;
            }
            r += 4;
        }
        for i in 1..=self.m {
            let sm = &sens[i - 1];
            for &(comp, _, upper) in &self.state_rows {
                let sign = if upper { -1.0 } else { 1.0 };
                for col in 0..2 * i {
                    jm[(r, col)] = sign * sm[(comp, col)];
                }
                r += 1;
            }
        }
        jm
    }
}
