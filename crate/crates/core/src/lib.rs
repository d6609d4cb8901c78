//! Level inpainting for tile-based platformer levels.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod augment;
pub mod corpus;
pub mod dataset;
pub mod eval;
pub mod markov;
pub mod models;
pub mod netcore;
pub mod scalar;
pub mod store;
pub mod synth;

pub use scalar::Scalar;

pub type Tensor32 = netcore::Tensor<f32>;
pub type Tensor64 = netcore::Tensor<f64>;
pub type Network32 = netcore::Network<f32>;
pub type Network64 = netcore::Network<f64>;
pub type Sample32 = dataset::Sample<f32>;
pub type NamedTensorStore32 = store::NamedTensorStore<f32>;
