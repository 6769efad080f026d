//! A self-contained convolutional-network graph engine.
//!
//! The crate builds classification and detection networks as explicit
//! computation graphs, analyzes them statically (output shapes, parameter
//! and multiply-accumulate counts), optimizes them (batch-norm folding),
//! executes them with reference-quality f32 kernels, and measures their
//! latency under a fixed batch-1 protocol.
//!
//! Start with the runnable examples (`cargo run --example summarize`) or
//! the `pelee` binary (`pelee --help`).

pub mod bench;
pub mod cli;
pub mod cost;
pub mod detector;
pub mod error;
pub mod fold;
pub mod formats;
pub mod graph;
pub mod ops;
pub mod store;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{Graph, GraphBuilder, NodeId, NodeKind};
pub use store::{WeightStore, WeightTensor};
pub use tensor::Tensor;
