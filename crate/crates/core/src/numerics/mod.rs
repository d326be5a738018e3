//! Dense tensors, reverse-mode differentiation, Adam and checkpoints.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, write_atomic,
    CHECKPOINT_MAGIC,
};
pub use graph::{softmax_in_place, Axis, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
