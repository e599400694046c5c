//! Eco-driving adaptive cruise control for a plug-in hybrid vehicle driving
//! through a corridor of signalized intersections.
//!
//! The crate is organized as a pipeline:
//!
//! - [`vehicle`]: longitudinal dynamics on a spatial grid and the route description.
//! - [`powertrain`]: parallel-hybrid component models, the equivalent-consumption
//!   torque split, and the precomputed power cost map used by the planner.
//! - [`signals`]: traffic-signal timing, historical red-duration statistics,
//!   arrival-infeasibility predicates, and scenario sampling.
//! - [`planner`]: backward dynamic programming over a (speed, travel-time) grid
//!   across a receding spatial horizon, with sampled terminal cost tables.
//! - [`acc`]: the high-rate tracking controller with gap-keeping and
//!   stop-at-red overrides, plus the safety monitor.
//! - [`sim`]: the deterministic two-rate closed-loop executor.
//! - [`eval`]: per-episode energy metrics, Monte-Carlo batches, and paired
//!   controller comparisons.
//! - [`config`]: the TOML-backed configuration tree with the reference corridor.

pub mod acc;
pub mod config;
pub mod eval;
pub mod grid;
pub mod planner;
pub mod powertrain;
pub mod signals;
pub mod sim;
pub mod vehicle;
