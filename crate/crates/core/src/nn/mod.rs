//! Minimal neural-network kernel: tensors, a parameter store, a reverse-mode
//! tape, layers, Adam and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod store;
pub mod tape;
pub mod tensor;

pub use layers::{dense_forward, Dense, Encoder, EncoderConfig, Mlp};
pub use optim::{adam_step, clip_global_norm, global_grad_norm, AdamConfig, AdamState};
pub use store::{ParamId, ParameterStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
