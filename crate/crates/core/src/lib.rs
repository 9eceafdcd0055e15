//! Federated causal generative modelling on synthetic structural-causal data.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
