//! Maneuver synthesis and policy training on a single-rigid-body locomotion model.
//!
//! The stack has three layers:
//!
//! 1. [`trajopt`] generates dynamically consistent turn references by direct
//!    collocation on the single-rigid-body dynamics in [`srbm`].
//! 2. [`simenv`] is an episodic contact environment driven by the same dynamics,
//!    and [`trainer`] runs PPO with recurrent [`policy`] networks on it, using
//!    the reward compositions in [`rewards`] and an epilogue terminal value for
//!    policy switching.
//! 3. [`eval`] reproduces the behavior-geometry and perturbation-robustness
//!    studies on the trained policies.

pub mod eval;
pub mod policy;
pub mod rewards;
pub mod simenv;
pub mod srbm;
pub mod trainer;
pub mod trajopt;
