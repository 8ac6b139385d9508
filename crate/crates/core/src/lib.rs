//! Optimal protection of a parallel-server routing system against faulty
//! routing and against a strategic attacker.
//!
//! - [`model`]: parameters, states, grids and tables.
//! - [`stability`]: drift certificates and protection floors.
//! - [`reliability`]: discounted-cost MDP solvers for random faults.
//! - [`security`]: the attacker-defender stochastic game.
//! - [`sim`]: Monte Carlo simulation of the controlled CTMC.

pub mod cli;
pub mod error;
pub mod model;
pub mod reliability;
pub mod security;
pub mod sim;
pub mod stability;

pub use error::{Error, Result};
