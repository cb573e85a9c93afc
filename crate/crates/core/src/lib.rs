//! Gated compression layers for early-stopping inference on partitioned
//! networks, with calibration, evaluation, an analytic power model and an
//! energy simulator for two-island deployments.

pub mod cascade;
pub mod data;
pub mod error;
pub mod gc;
pub mod harness;
pub mod island;
pub mod nn;
pub mod power;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
