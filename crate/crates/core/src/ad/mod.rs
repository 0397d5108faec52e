//! Minimal reverse-mode automatic differentiation: a tensor type, a
//! define-by-run tape with exactly the operators the classifier needs,
//! parameter storage, the Adam optimizer and the `PSTA` checkpoint format.

mod adam;
mod checkpoint;
mod error;
pub mod gradcheck;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState, MomentSlot};
pub use checkpoint::{
    Checkpoint, CheckpointEntry, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use error::AdError;
pub use params::{
    BatchNormParams, BnUpdate, Init, LayerParams, Mlp, Mode, NamedTensor, ParamId, ParamStore,
    BN_EPS, BN_MOMENTUM,
};
pub use scalar::{DType, Scalar};
pub use tape::{BatchStats, Gradients, ReduceKind, Tape, Var};
pub use tensor::Tensor;
