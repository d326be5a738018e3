//! Multi-modal transformer jointly trained for pronoun coreference
//! resolution and visual dialog answer ranking.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to one precision.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod headselect;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod pruning;
pub mod scalar;
pub mod taskheads;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type ParamStore64 = numerics::ParamStore<f64>;
pub type ParamStore32 = numerics::ParamStore<f32>;
