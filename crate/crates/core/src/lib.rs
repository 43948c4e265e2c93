//! Desk-scale data-parallel SGD over a stale-synchronous parameter server,
//! with per-layer communication strategies (full matrices via the server,
//! sufficient factors via the server, or peer-to-peer factor broadcast) and
//! wait-free layer-overlapped backpropagation.
//!
//! Runs both as a deterministic in-process simulation with shaped links and
//! as a real multi-process TCP deployment.
//!
//! All numeric kernels are generic over the run-wide scalar precision; see
//! the aliases at the crate root for the two concrete instantiations.

pub mod error;
pub mod scalar;
pub mod tensor;

pub mod aggregate;
pub mod comm;
pub mod config;
pub mod consistency;
pub mod data;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod node;
pub mod server;
pub mod sim;
pub mod solver;
pub mod sufficient_factor;
pub mod tcp;
pub mod worker;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 32-bit matrix (training precision).
pub type Matrix32 = tensor::DenseMatrix<f32>;
/// 64-bit matrix (verification precision).
pub type Matrix64 = tensor::DenseMatrix<f64>;
/// 32-bit vector.
pub type Vector32 = tensor::DenseVector<f32>;
/// 64-bit vector.
pub type Vector64 = tensor::DenseVector<f64>;
