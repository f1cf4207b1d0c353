//! Offline cooperative multi-agent RL where a behavior-regularized value
//! learned on the joint observation is decomposed into per-agent values and
//! policies, plus an exact tabular solver for the same regularized MDP.
//!
//! - [`approximator`]: MLPs with reverse-mode gradients, Adam, soft updates.
//! - [`envs`]: cooperative matrix game and grid world, tabular export,
//!   behavior policies.
//! - [`dataset`]: offline datasets on disk (`manifest.json` + `transitions.jsonl`).
//! - [`mixer`]: shared-weight linear decomposition of `Q_tot` and `V_tot`.
//! - [`trainer`]: the three in-sample losses, the training loop, evaluation
//!   and a behavior-cloning baseline.
//! - [`oracle`]: exact fixed-point solver and closed-form checks.
//! - [`verify`]: trained models checked against the oracle.
//! - [`cli`]: the `omiga` command line.

pub mod approximator;
pub mod cli;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod mixer;
pub mod oracle;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
