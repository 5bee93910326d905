//! Block-wise token dropping for long-context prefill on a small
//! reference transformer, with paged KV cache, continuous batching,
//! simulated tensor parallelism and analytic FLOP accounting.

pub mod bench;
pub mod cli;
pub mod error;
pub mod flops;
pub mod importance;
pub mod kvcache;
pub mod model;
pub mod pipeline;
pub mod propagation;
pub mod rng;
pub mod scheduler;
pub mod selection;
pub mod tensor;
pub mod synth;
pub mod oracle;
pub mod report;
pub mod tasks;
pub mod tp_sim;
pub mod workload;

pub use error::{EngineError, Result};
pub use importance::ScoreConfig;
pub use model::{Model, ModelConfig, SublayerKind};
pub use pipeline::DropPolicy;
pub use tensor::HiddenStates;
