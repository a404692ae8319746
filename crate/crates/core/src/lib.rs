//! Lane-change planning stack for a highway setting.
//!
//! The crate is organized as a pipeline:
//!
//! * [`state`], [`geometry`], [`limits`], [`scenario`], [`trace`] — shared
//!   vehicle/road types, scenario files and trace export;
//! * [`refgen`] — jerk-bounded trapezoidal maneuver references and the
//!   lane/speed decision set;
//! * [`traffic`] — IDM/MOBIL background traffic simulation;
//! * [`predict`] — constant-velocity and interaction-aware prediction of
//!   surrounding vehicles conditioned on an ego maneuver;
//! * [`evaluate`] — safety/efficiency/comfort costs and decision selection;
//! * [`occupancy`] — rotated-rectangle occupancy polytopes, exact distance,
//!   and separation certificates;
//! * [`nlp`] — a dense primal-dual interior-point solver;
//! * [`planner`] — receding-horizon MPC tracking a committed reference under
//!   kinematic, actuation, and collision constraints.

pub mod evaluate;
pub mod geometry;
pub mod limits;
pub mod nlp;
pub mod occupancy;
pub mod planner;
pub mod predict;
pub mod refgen;
pub mod scenario;
pub mod state;
pub mod trace;
pub mod traffic;

pub use geometry::{RoadGeometry, VehicleGeometry};
pub use limits::MotionLimits;
pub use scenario::Scenario;
pub use state::{ControlInput, Trajectory, VehicleState};
