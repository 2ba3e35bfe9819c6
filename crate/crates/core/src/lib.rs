//! Open-world graph structure learning.
//!
//! A structure learner shared across source graphs scores node-pivot
//! affinities from node embeddings; per-graph GCNs propagate features over
//! a blend of the observed graph and the latent pivot structure. After
//! training on sources the learner is frozen and reused on unseen targets,
//! where only a fresh GCN is trained.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gnn;
pub mod graph;
pub mod learner;
pub mod objective;
pub mod optim;
pub mod sparse;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Masks, Structure};
pub use sparse::SparseMatrix;
pub use tensor::Tensor;
