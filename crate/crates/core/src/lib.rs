//! Portfolio rebalancing with a deterministic policy-gradient agent whose actor and
//! critic are gated Transformer encoders with 2D relative attention, trained
//! against a market simulator with integer-share rebalancing, fees and
//! spread-based slippage.
//!
//! The tensor, network and agent layers are generic over [`Scalar`] (`f32` or
//! `f64`); the aliases below fix them to `f64`, which is what the simulator,
//! trainer and baselines use.

pub mod agent;
pub mod baselines;
pub mod data;
pub mod env;
pub mod nn;
pub mod replay;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type ParamStore = tensor::ParamStore<f64>;
pub type Adam = tensor::Adam<f64>;
