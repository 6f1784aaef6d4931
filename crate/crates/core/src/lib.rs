//! Desk-scale hybrid window attention lab.
//!
//! Multidirectional sliding window attention and its oracles, 3D rotary
//! embeddings, a toy dual-stream diffusion transformer, rectified-flow
//! sampling with truncated reward backpropagation, and token-length
//! bucketing with a data-parallel throughput simulator.

pub mod attention;
pub mod bucketing;
mod error;
pub mod flow;
pub mod model;
pub mod numerics;
pub mod rope3d;

pub use error::{Error, Result};
