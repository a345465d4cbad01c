//! Meta-reinforcement-learning framework: recurrent, recurrent-hypernetwork,
//! and task-inference agents trained with PPO on grid-world and
//! memory-corridor task distributions, plus the experiment harness
//! (sweeps, bootstrap confidence intervals, latent-gradient probes).

pub mod agents;
pub mod analysis;
pub mod checkpoint;
pub mod diffcore;
pub mod envs;
pub mod nets;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use diffcore::{DiffError, Graph, NodeId, ParamSet, Tensor};
