//! Road-conditioned spatiotemporal forecasting of city-wide traffic movies.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`graph`]), the
//! forecasting network ([`model`] and its parts), the training objective
//! ([`loss`]), data handling ([`data`]), evaluation ([`metrics`]) and the
//! optimisation loop ([`trainer`]). Numeric code is generic over
//! [`Scalar`]; the aliases below fix the production (`f32`) and gradient
//! verification (`f64`) instantiations.

pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod evaluate;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod temporal;
pub mod tensor;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Resample, Var};
pub use kernels::ConvGeometry;
pub use layers::{Bound, Init, ParamId, ParamStore};
pub use model::{ModelConfig, PriorMode, RcsNet};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type RcsNet32 = RcsNet<f32>;
pub type RcsNet64 = RcsNet<f64>;
