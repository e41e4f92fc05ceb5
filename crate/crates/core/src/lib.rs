//! Vision Transformer inference with attention-scored token merging,
//! dual-scale feature fusion, and a MAC-level cost model.

pub mod cli;
pub mod error;
pub mod flops;
pub mod io;
pub mod model;
pub mod multiscale;
pub mod pruning;
pub mod tensor;
pub mod transformer;
pub mod viz;

pub use error::{Error, Result};
pub use model::{forward, random_init, ForwardTrace, ModelConfig, ModelWeights};
pub use tensor::Tensor;
