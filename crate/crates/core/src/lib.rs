//! Memory-augmented single-object tracker with relevance-pruned attention.
//!
//! The crate is self-contained: tensors, reverse-mode differentiation, the
//! transformer encoder, relevance attention, the global-representation
//! memory, prediction head, losses, optimizer, synthetic data, metrics, and
//! an analytic compute model all live here. The `grtrack` binary wires these
//! into a command-line workflow.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod img;
pub mod loss;
pub mod macs;
pub mod memory;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod relevance;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{ConvGeom, Graph, Var};
pub use rng::Rng;
pub use tensor::Tensor;
