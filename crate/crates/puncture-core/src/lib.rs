//! Adaptive constrained velocity control for automated needle insertion.
//!
//! The crate provides the full control and simulation stack for a
//! velocity-controlled serial manipulator that inserts a needle along a
//! measured guide line while staying clear of geometric keep-out zones:
//!
//! - [`geom`]: quaternion / dual-quaternion algebra, Plücker lines,
//!   planes, cylinders, cones, and the scalar distance functions the
//!   constraints differentiate;
//! - [`kinematics`]: Denavit-Hartenberg forward kinematics and analytic
//!   task Jacobians (pose, translation, rotation, line direction);
//! - [`qp`]: a dense dual active-set solver for the small strictly convex
//!   quadratic programs both control laws reduce to;
//! - [`vfi`]: vector-field-inequality constraint rows (keep-out cylinder,
//!   keep-in cylinder, cone, plane, joint limits) and their stacking;
//! - [`trajectory`]: rest-to-rest quintic time scaling for the insertion;
//! - [`control`]: the constrained task-space control law and the online
//!   adaptation of the uncertain base/needle attachment parameters;
//! - [`sim`]: ground-truth world model, noisy virtual sensors, randomized
//!   scenario generation, and the three-step procedure state machine;
//! - [`metrics`]: puncture-quality variables, summary statistics, and
//!   Spearman rank correlation;
//! - [`selfcheck`]: finite-difference and certificate suites used by the
//!   command-line `check` subcommand.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the companion CLI
//! crate carries all file formats and I/O.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod control;
pub mod geom;
pub mod kinematics;
pub mod metrics;
pub mod qp;
pub mod selfcheck;
pub mod sim;
pub mod trajectory;
pub mod vfi;

pub use geom::{Cone, Cylinder, DualQuat, Plane, PluckerLine, Quat, UnitDualQuat};
pub use kinematics::{SerialManipulator, TaskJacobians};
pub use qp::{solve_qp, QpProblem, QpSolution, QpStatus};
pub use sim::{run_batch, run_trial, Scenario, TrialRecord, TrialStatus};
