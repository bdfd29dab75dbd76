//! Dense CPU engine for the five layer primitives the search space needs.
//!
//! Training runs in `f32`; gradient checks run the same code in `f64`. The loss is the
//! per-element mean squared error, which differs from the per-image squared norm
//! averaged over the batch only by the constant pixel count.

mod checkpoint;
pub mod gradcheck;
mod network;
pub mod ops;
mod tensor;
mod train;

pub use checkpoint::{
    read_weights, weights_from_bytes, weights_to_bytes, write_weights, WEIGHTS_MAGIC,
    WEIGHTS_VERSION,
};
pub use network::{
    ForwardCache, Gradients, LayerParams, Moments, TrainableNetwork, ADAM_BETA1, ADAM_BETA2,
    ADAM_EPS,
};
pub use tensor::{Scalar, Tensor4};
pub use train::{scheduled_lr, train_steps, BatchSource, Identity, Restorer, TrainTrace, LR_DECAY};
