//! Numerical core of the auto-tuned ecological cruise controller.
//!
//! The pipeline is:
//!
//! 1. [`dp`] solves the whole-road minimum-fuel problem on a `(V, V_avg)` grid.
//! 2. [`inverse`] recovers, for every position, the LMPC fuel weight `gamma`
//!    that makes the DP trajectory window stationary for the MPC problem.
//! 3. [`nn`] fits a rectified MLP mapping a 3 km grade preview and the set
//!    point to `gamma`.
//! 4. [`sim`] closes the loop on the nonlinear plant with fixed-weight,
//!    pre-tuned and auto-tuned MPC ([`mpc`]), a PI cruise baseline and the
//!    open-loop DP replay.
//!
//! Everything here is `no_std` + `alloc`; file formats, the CLI and
//! wall-clock timing live in the `ecocruise` crate.

#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` is the idiom used throughout to reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

mod math;

pub mod dp;
pub mod inverse;
pub mod lsq;
pub mod mpc;
pub mod nn;
pub mod qp;
pub mod road;
pub mod sim;
pub mod trajectory;
pub mod vehicle;

pub use dp::{DpConfig, DpError, DpSolution, Grid};
pub use inverse::{GammaFlags, GammaSeries, InverseConfig, InverseError, KktSystem};
pub use mpc::{MpcConfig, MpcError, MpcProblem, MpcSolution};
pub use nn::{Dataset, MinMaxScaler, MlpModel, NnError, TrainConfig, TrainHistory, TrainOutcome};
pub use road::{GeneratorSpec, GradePreview, RoadError, RoadProfile, Sinusoid};
pub use sim::{Artifacts, ControllerKind, ControllerSpec, SimError, SimResult, StepTimer, Summary};
pub use trajectory::Trajectory;
pub use vehicle::{LinearizedModel, VehicleError, VehicleParams};
