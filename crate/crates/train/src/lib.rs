//! Training of binary and ternary networks with real-valued latent weights,
//! straight-through gradients, AdamW and cosine warm restarts.

pub mod augment;
pub mod checkpoint;
pub mod error;
mod export;
pub mod net;
pub mod optim;
pub mod quant;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use net::{Mode, Quantization, ShadowModel};
pub use train::{train, TrainConfig, TrainOutcome};
