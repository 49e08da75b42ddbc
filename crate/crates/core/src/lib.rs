//! Equilibrium seeking for multi-population aggregative games with linear
//! coupling constraints.
//!
//! Population coordinators each hold a local estimate `y_l = col(sigma_l,
//! lambda_l)` of the aggregate and the coupling price, broadcast the
//! incentive `C sigma_l + K lambda_l` to their agents, and combine a
//! Krasnoselskii-Mann step on the local fixed-point map with consensus over a
//! time-varying graph. A centralized single-coordinator iteration serves as
//! the reference solution.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod engine;
pub mod error;
pub mod ev;
pub mod game;
pub mod mappings;
pub mod network;
mod par;
pub mod projections;
pub mod report;
mod serde_util;
pub mod trace;

pub use engine::{run_algorithm1, run_oracle, RunResult, RunSettings, Termination};
pub use error::{Error, Result};
pub use game::{validate_game, AgentProfile, GameConfig, IncentiveState, Matrix, PopulationSpec, StepSchedule, Vector};
pub use mappings::OperatorContext;
pub use network::GraphSequence;
pub use par::parallel_available;
pub use report::ValidationReport;
