//! Vehicle state, control input, and sampled trajectories.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Planar kinematic state: rear-axle-free center position, heading, speed.
///
/// The frame is road-aligned: `x` along the road, `y` left-positive, `psi`
/// measured from the +x axis. `v` is the speed along the heading (m/s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, psi: f64, v: f64) -> Self {
        let s = Self { x, y, psi, v };
        assert!(s.is_valid(), "invalid vehicle state: {s:?}");
        s
    }

    /// All fields finite and speed non-negative.
    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.psi.is_finite()
            && self.v.is_finite()
            && self.v >= 0.0
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    /// Velocity components (vx, vy) in the road frame.
    pub fn velocity(&self) -> (f64, f64) {
        (self.v * self.psi.cos(), self.v * self.psi.sin())
    }
}

/// Longitudinal acceleration (m/s^2) and front steering angle (rad).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub a: f64,
    pub delta: f64,
}

impl ControlInput {
    pub fn new(a: f64, delta: f64) -> Self {
        Self { a, delta }
    }
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    if -PI < a && a <= PI {
        return a; // already in range: keep the exact value
    }
    let mut r = a.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r -= std::f64::consts::TAU;
    }
    r
}

/// Interpolate between two angles along the shortest arc, `t` in [0, 1].
pub fn angle_lerp(from: f64, to: f64, t: f64) -> f64 {
    wrap_angle(from + wrap_angle(to - from) * t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleError {
    /// dt must be positive and finite.
    NonPositiveDt,
    /// New period is neither an integer multiple nor an integer divisor of
    /// the old one.
    NotCommensurate,
    /// The trajectory's endpoints or start step do not fall on the new
    /// sampling grid.
    GridMismatch,
}

impl fmt::Display for ResampleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonPositiveDt => write!(f, "resample period must be positive"),
            Self::NotCommensurate => {
                write!(f, "resample period must be an integer multiple or divisor of dt")
            }
            Self::GridMismatch => {
                write!(f, "trajectory endpoints do not fall on the resampled grid")
            }
        }
    }
}

impl std::error::Error for ResampleError {}

/// A uniformly sampled state sequence.
///
/// Sample `i` corresponds to the absolute time step `start_step + i`, i.e.
/// time `(start_step + i) * dt` seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    start_step: i64,
    dt: f64,
    states: Vec<VehicleState>,
}

impl Trajectory {
    /// Invariants checked here: positive finite `dt`, at least one state,
    /// every state valid. Trajectories are immutable once built.
    pub fn new(start_step: i64, dt: f64, states: Vec<VehicleState>) -> Self {
        assert!(dt.is_finite() && dt > 0.0, "trajectory dt must be positive");
        assert!(!states.is_empty(), "trajectory must contain at least one state");
        for (i, s) in states.iter().enumerate() {
            assert!(s.is_valid(), "invalid state at sample {i}: {s:?}");
        }
        Self { start_step, dt, states }
    }

    pub fn start_step(&self) -> i64 {
        self.start_step
    }

    /// Absolute step of the final sample.
    pub fn end_step(&self) -> i64 {
        self.start_step + self.states.len() as i64 - 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        false // non-empty by construction
    }

    pub fn states(&self) -> &[VehicleState] {
        &self.states
    }

    pub fn state(&self, i: usize) -> VehicleState {
        self.states[i]
    }

    pub fn first(&self) -> VehicleState {
        self.states[0]
    }

    pub fn last(&self) -> VehicleState {
        *self.states.last().unwrap()
    }

    /// State at an absolute time step, if covered.
    pub fn at_step(&self, step: i64) -> Option<VehicleState> {
        let i = step - self.start_step;
        if i < 0 {
            return None;
        }
        self.states.get(i as usize).copied()
    }

    /// Time (s) of sample `i`.
    pub fn time_of(&self, i: usize) -> f64 {
        (self.start_step + i as i64) as f64 * self.dt
    }

    /// Re-express the trajectory at a new sampling period.
    ///
    /// `dt_new` must be an integer multiple (downsampling; the endpoints and
    /// start step must stay on the coarser grid) or an integer divisor
    /// (upsampling by linear interpolation, shortest-arc for heading) of the
    /// current period. Original samples are preserved bit-for-bit.
    pub fn resample(&self, dt_new: f64) -> Result<Trajectory, ResampleError> {
        if !(dt_new.is_finite() && dt_new > 0.0) {
            return Err(ResampleError::NonPositiveDt);
        }
        let ratio = dt_new / self.dt;
        if (ratio - 1.0).abs() < 1e-12 {
            return Ok(self.clone());
        }
        if ratio > 1.0 {
            // Downsample: keep every m-th state.
            let m = ratio.round();
            if (ratio - m).abs() > 1e-9 * ratio {
                return Err(ResampleError::NotCommensurate);
            }
            let m = m as usize;
            if (self.states.len() - 1) % m != 0 || self.start_step % m as i64 != 0 {
                return Err(ResampleError::GridMismatch);
            }
            let states: Vec<_> = self.states.iter().step_by(m).copied().collect();
            Ok(Trajectory::new(self.start_step / m as i64, dt_new, states))
        } else {
            // Upsample: insert k-1 interpolated states between neighbors.
            let inv = self.dt / dt_new;
            let k = inv.round();
            if (inv - k).abs() > 1e-9 * inv {
                return Err(ResampleError::NotCommensurate);
            }
            let k = k as usize;
            let n = (self.states.len() - 1) * k + 1;
            let mut states = Vec::with_capacity(n);
            for i in 0..self.states.len() - 1 {
                let a = self.states[i];
                let b = self.states[i + 1];
                states.push(a);
                for j in 1..k {
                    let t = j as f64 / k as f64;
                    states.push(VehicleState {
                        x: a.x + (b.x - a.x) * t,
                        y: a.y + (b.y - a.y) * t,
                        psi: angle_lerp(a.psi, b.psi, t),
                        v: (a.v + (b.v - a.v) * t).max(0.0),
                    });
                }
            }
            states.push(*self.states.last().unwrap());
            Ok(Trajectory::new(self.start_step * k as i64, dt_new, states))
        }
    }
}
