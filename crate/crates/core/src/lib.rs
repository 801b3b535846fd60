//! Graph neural network training with graph-structure prompt losses.
//!
//! The crate trains GCN, GraphSage-mean, and GIN encoders on node
//! classification, graph classification, and edge prediction, optionally
//! adding two task-independent structure losses: a first-order loss that
//! regresses each node's log-degree from its embedding, and a second-order
//! loss that regresses the log histogram of its neighbors' degrees (plus a
//! whole-graph degree histogram for graph-level tasks). Linear probes over
//! frozen embeddings quantify how much degree structure a trained model
//! retains.
//!
//! Everything runs on a small reverse-mode tape over dense `f64` tensors and
//! CSR sparse operators; all randomness is seed-controlled and every kernel
//! is deterministic, so repeated runs reproduce metrics bit for bit.

pub mod dataset;
pub mod error;
pub mod graph;
pub mod losses;
pub mod models;
pub mod optim;
pub mod probe;
pub mod report;
pub mod sparse;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, StructureTargets};
pub use sparse::CsrMatrix;
pub use tensor::Tensor;
