//! Decentralized multi-agent multi-resource allocation.
//!
//! The crate is organised around the pieces of the allocation stack:
//!
//! - [`world`]: single-integrator agents carrying resources to demanding consumers.
//! - [`assignment`]: exact agent-to-consumer assignment (branch-and-bound) plus an
//!   enumeration oracle.
//! - [`rewards`]: per-agent reward terms computed from consecutive world states.
//! - [`neuro`]: the DeepSets / graph-filter / cluster-consensus ODE network with a
//!   small reverse-mode tape for gradients.
//! - [`policy`]: Gaussian actor and scalar critic on top of the network.
//! - [`training`]: independent PPO with GAE and a contraction penalty.
//! - [`expert`]: centralized proportional controller used as a baseline.
//! - [`evaluation`]: episode returns of the policy, the expert and random commands.
//! - [`analysis`]: log-norms, contraction rates and cluster detection.
//! - [`io`]: run configuration, traces, metrics and reports on disk.

pub mod analysis;
pub mod assignment;
pub mod config;
pub mod episode;
pub mod error;
pub mod evaluation;
pub mod expert;
pub mod io;
pub mod neuro;
pub mod policy;
pub mod rewards;
pub mod training;
pub mod world;

pub use error::{Error, Result};
