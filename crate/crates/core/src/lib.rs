//! Structured pruning via optimal transport over a minimal NN engine.
//!
//! The toolkit implements two meta-pruning procedures over dependency-grouped
//! channels: conventional top-m pruning and intra-group fusion, where the
//! discarded channels are merged into the survivors through an exact optimal
//! transport plan. It also provides inter-model fusion (neuron alignment and
//! averaging), split-data training pipelines, and an evaluation harness
//! (accuracy, output divergence, loss-landscape slices).

pub mod arch;
pub mod dataset;
pub mod depgraph;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod graph;
pub mod importance;
pub mod kmeans;
pub mod model_io;
pub mod ot;
pub mod pipeline;
pub mod prune;
pub mod parallel;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
