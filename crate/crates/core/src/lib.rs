//! Simulator for Byzantine fault-tolerant federated policy-gradient learning.
//!
//! K agents learn one episodic task in lock-step rounds. Honest agents sample
//! trajectories, estimate policy gradients with variance reduction, and
//! exchange estimates and parameters through an in-process network in which
//! an omniscient adversary writes the Byzantine messages. Robust aggregation
//! and averaging agreement keep the honest agents on track.

pub mod adversary;
pub mod agreement;
pub mod algorithms;
pub mod env;
pub mod error;
pub mod estimators;
pub mod param;
pub mod policy;
pub mod robust_agg;
pub mod runtime;

pub use error::{Error, Result};
pub use param::ParamVector;
