//! Safety verification of unknown discrete-time systems from noisy samples.
//!
//! The pipeline learns each output component of the dynamics with Gaussian
//! process regression ([`gp`]), turns a uniform error bound on the regression
//! ([`bounds`]) into an interval MDP over a grid of the safe set
//! ([`abstraction`]), and computes per-cell lower and upper bounds on the
//! probability of staying safe by interval value iteration ([`verifier`]).
//! [`validation`] holds independent oracles (Monte Carlo and brute force),
//! and [`config`] / [`pipeline`] drive the staged command-line workflow.

pub mod abstraction;
pub mod bounds;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod gp;
pub mod pipeline;
pub mod validation;
pub mod verifier;

pub use error::{Error, Result};
