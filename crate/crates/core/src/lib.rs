//! Age-of-processing minimization for an edge-offloading status-update loop.
//!
//! - [`aop_model`]: timing, channel, the finite state/action space and rewards.
//! - [`mdp_solver`]: average-reward policy evaluation and policy iteration.
//! - [`cmdp_lagrangian`]: multiplier search and the two-policy mixture.
//! - [`simulator`]: seeded trajectories for solved and benchmark policies.

pub mod aop_model;
pub mod cmdp_lagrangian;
pub mod mdp_solver;
pub mod simulator;
