//! Deterministic simulator for decentralized model averaging and blockwise
//! model-update filtering (BMUF) on a symmetric ring.
//!
//! The engine runs `n` simulated workers in lockstep. Each worker takes local
//! SGD steps on its data shard; every `H_i` steps component `i` of its
//! parameter vector is averaged with `q` randomly chosen ring neighbors and
//! either taken as-is (MA) or passed through a block momentum filter (BMUF).
//! Taking all neighbors gives the local-* variants; averaging over every
//! worker gives centralized BMUF with Nesterov block momentum.
//!
//! - [`topology`]: ring neighbor sets and keyed random streams
//! - [`partition`]: component layout and sync schedule
//! - [`worker`]: per-worker slots and update rules
//! - [`objectives`]: gradient oracles with known curvature and noise
//! - [`simulator`]: the lockstep engine, Simple MA, single-worker SGD, metrics
//! - [`theory`]: the Simple-MA convergence bound and its empirical check
//! - [`experiment`]: experiment files and the command implementations

pub mod error;
pub mod experiment;
pub mod objectives;
pub mod partition;
pub mod simulator;
pub mod theory;
pub mod topology;
pub mod worker;

pub use error::{Error, Result};
pub use objectives::{GradientOracle, Objective, ObjectiveConfig};
pub use partition::{ComponentLayout, ParameterVector};
pub use simulator::{Algorithm, GossipSim, LearningRate, RunConfig, RunMetrics};
pub use topology::RingTopology;
pub use worker::{BmufParams, SyncRule, WorkerState};
