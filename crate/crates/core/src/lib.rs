//! Attention-guided weight mixup for finetuning small pretrained networks.
//!
//! Every hidden linear layer keeps a frozen pretrained weight `W₀` next to a
//! trainable task weight `W`. Per-entry coefficients built from low-rank factors
//! in `[0, 1]` decide how much of each the forward pass uses. The factors are
//! learned on a held-out split by bi-level optimization ([`blo`]); the task
//! weights are then finetuned with the coefficients frozen.

pub mod blo;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod seed;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Activation, Graph, Var};
pub use model::{Coefficients, Network, TaskKind, Targets};
pub use tensor::Tensor;
