//! Deterministic simulator for synchronous distributed SGD with gossip,
//! elastic gossip, EASGD and all-reduce communication.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the 64-bit instantiation used by the CLI.

pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod numeric;
pub mod protocols;
pub mod rng;
pub mod scalar;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = numeric::Matrix<f64>;
pub type Params64 = nn::ParamVector<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type Matrix32 = numeric::Matrix<f32>;
pub type Params32 = nn::ParamVector<f32>;
pub type Dataset32 = data::Dataset<f32>;
