//! Reverse-mode automatic differentiation, the primitives the tracing
//! models use, Adam, and the parameter checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod lstm;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use adam::{adam_step, AdamGroup, AdamState};
pub use gradcheck::{grad_check, Coverage};
pub use graph::{softmax_in_place, Graph, NodeId, PROB_FLOOR};
pub use lstm::{lstm_forward, LstmNodes, LstmParams};
pub use params::{uniform_fan_in, Gradients, ParamGroup, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
