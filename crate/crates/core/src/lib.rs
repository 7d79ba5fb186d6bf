//! Visual knowledge tracing: models that predict how a learner will
//! classify images while they are still learning the categories.
//!
//! Numeric code is generic over [`numerics::Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod data;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod simulator;
pub mod tracers;

pub use error::{Error, Result};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type ParamStore32 = numerics::ParamStore<f32>;
pub type ParamStore64 = numerics::ParamStore<f64>;
pub type TracerModel32 = tracers::TracerModel<f32>;
pub type TracerModel64 = tracers::TracerModel<f64>;
pub type Stimuli32 = tracers::Stimuli<f32>;
pub type Stimuli64 = tracers::Stimuli<f64>;
