//! Broadcast-based subgraph sampling for decentralized SGD over wireless
//! networks.
//!
//! The library covers the full pipeline: partitioning a connected topology
//! into collision-free broadcast subsets, enumerating budget-constrained
//! subgraph candidates, jointly optimizing mixing matrices and sampling
//! probabilities (plus a cheaper centrality-based heuristic), and running a
//! slot-accounting D-SGD simulation with baselines.
//!
//! Modules:
//! - [`graph`]: topology construction, collision-free partitioning,
//!   betweenness centrality, Laplacians.
//! - [`sampler`]: subgraph candidates and their effective adjacency /
//!   Laplacian / incidence structures.
//! - [`optimizer`]: the spectral objective, alternating optimization of
//!   mixing matrices and probabilities, initializations, and the heuristic
//!   scheduling-probability design.
//! - [`simulator`]: synthetic convex tasks, schedulers, link failures, and
//!   the D-SGD training loop with per-iteration metric traces.
//! - [`spectral`]: shared dense symmetric eigendecomposition helpers.

pub mod graph;
pub mod optimizer;
pub mod sampler;
pub mod simulator;
pub mod spectral;

pub use graph::{Graph, Partition};
pub use optimizer::{HeuristicPolicy, MixingPolicy};
pub use sampler::{Candidate, CandidateSet};
pub use simulator::{Task, TrainTrace};
