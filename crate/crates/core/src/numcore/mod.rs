//! Differentiable numeric kernel: tensors, a reverse-mode graph, the layer
//! primitives the models need, a finite-difference checker and Adam.
//!
//! Everything runs in `f64`. Any NaN or infinity produced by an operation is
//! reported as [`Error::NonFinite`](crate::Error::NonFinite).

mod adam;
pub mod gradcheck;
mod graph;
pub mod init;
pub(crate) mod kernels;
pub mod layers;
mod ops;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_difference_check, FdReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::{
    cosine_similarity, layer_norm, multi_head_self_attention, softmax, sq_l2_distance,
    AttentionParams,
};
pub use params::{ParamEntry, ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;

/// Gradient of the scalar `output` w.r.t. every trainable parameter of `graph`.
pub fn backprop(graph: &Graph, output: Var) -> crate::Result<ParamGrads> {
    Ok(graph.backward(output)?.into_params())
}
