//! Testbed for jointly learned event-triggered control and OFDMA downlink
//! scheduling over a shared wireless link.
//!
//! A cart-pole plant is stabilized over a network: a base module decides when
//! to transmit a state update and what force to apply, while a first module
//! assigns subcarriers and transmit powers to URLLC and eMBB users. Both are
//! trained together by a cascaded double actor-critic with a
//! stability-critic/multiplier loop that penalizes predicted constraint
//! drift. Model-based baselines (LQR with an event trigger plus an
//! alternating minimum-power allocator) and small brute-force instances
//! provide ground truth for comparison.
//!
//! Entry points:
//! - [`train::train`] / [`train::evaluate`] for programmatic use,
//! - [`commands`] for the `train`/`eval`/`compare`/`sweep`/`plotdata`/
//!   `selftest` verbs behind the `csdac` binary,
//! - `examples/` for focused, runnable walkthroughs of each capability.

pub mod agent;
pub mod baseline;
pub mod commands;
pub mod config;
pub mod env;
pub mod error;
pub mod network;
pub mod nn;
pub mod plant;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
