//! Incentive design for hierarchical model predictive control.
//!
//! A leader (the ISO in the EV case) solves a robustly tightened team-optimal
//! problem, then steers a population of followers toward its plan by
//! iterating on a price vector λ. Followers are only ever queried for their
//! optimal responses.
//!
//! * [`solvers`]: box-constrained accelerated proximal gradient, and an
//!   interior-point and an augmented-Lagrangian solver over polytopes.
//! * [`lompc`]: follower problems, incentive maps and populations.
//! * [`incentive`]: dual ascent, the majorization-minimization update, the
//!   dual-decrease audit, and incentive regularization.
//! * [`bimpc`]: batch dynamics, constraint tightening and the leader problem.
//! * [`ev`]: the EV dynamic-pricing scenario.
//! * [`sim`]: closed-loop simulation, traces and audits.
//! * [`verify`]: randomized checks of the error bound and the dual decrease.
//! * [`plot`]: figure tables from traces and verification runs.
//! * [`cli`]: the `incentive-mpc` command.

pub mod bimpc;
pub mod cli;
pub mod error;
pub mod ev;
pub mod incentive;
pub mod lompc;
pub mod plot;
pub mod sim;
pub mod solvers;
pub mod verify;

pub use error::{Error, Result};
