//! Randomized patrolling on synchronized grids of circular trajectories.
//!
//! [`topology`] builds the grid, its synchronization schedule and walking
//! graph; [`sim`] runs teams of robots under the three shifting strategies;
//! [`metrics`] reduces event logs to idle, isolation and broadcast times;
//! [`motion`] builds the one-tour transition matrix and analyses it;
//! [`bounds`] holds the closed-form quantities; [`experiments`] drives
//! sweeps and writes result files.

pub mod bounds;
pub mod experiments;
pub mod linalg;
pub mod metrics;
pub mod motion;
pub mod sim;
pub mod topology;

pub use sim::{MeetingRule, SimConfig, Strategy, StrategyKind};
pub use topology::{GridSpec, Topology};
