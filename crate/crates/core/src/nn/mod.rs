//! Tensors, parameters, layer kernels, optimisers and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::finite_diff_check;
pub use init::{init_tensor, InitMethod, InitSpec};
pub use layers::{
    dense, dropout, embedding_lookup, gru_step, softmax_cross_entropy, Activation, GruWeights,
};
pub use optim::{clip_by_global_norm, optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
