//! Low-rank activation compression for memory-efficient training.
//!
//! A frozen network is run once over calibration batches to fix orthonormal
//! per-mode factors for every trainable layer's input. Training then keeps
//! only the small core of each input for the backward pass and rebuilds an
//! approximation of it when the weight gradient is formed.

pub mod autograd;
pub mod calibrate;
pub mod continual;
pub mod data;
pub mod format;
pub mod linalg;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use autograd::{backward, forward, sgd_step, Gradients, LayerKind, LayerSpec, Network, StoragePolicy};
pub use calibrate::{calibrate_bank, memory_update, CovarianceAccumulator, MemoryBank, SubspaceBank};
pub use tensor::{DenseMatrix, DenseTensor};
