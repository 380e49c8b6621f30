//! From-scratch ensemble neural-network training toolkit.
//!
//! Four ways of combining one-hidden-layer MLP sub-networks are implemented
//! and compared on the MNIST-family and WDBC benchmarks:
//!
//! - independent ensemble: members trained on their own losses, outputs
//!   averaged at test time;
//! - cooperative ensemble: members trained concurrently against the loss of
//!   the averaged output;
//! - mixture-of-experts: a gating network hard-selects one expert per
//!   sample and weights its loss by the gate probability;
//! - kWTA ensemble: member outputs are concatenated, recombined by an
//!   affine layer, and passed through a k-winners-take-all activation
//!   (optionally delayed for the first `d` epochs).
//!
//! The numeric kernels are generic over the scalar type (`f32`/`f64` via
//! [`scalar::Scalar`]); the aliases below pin the `f64` instantiation used
//! by the data pipeline, the training loop, and the gradient checks.

pub mod data;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod report;
pub mod scalar;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense `f64` matrix, the universal numeric carrier of the pipeline.
pub type Matrix = linalg::Matrix<f64>;
/// Dense `f32` matrix, for callers that trade precision for memory.
pub type Matrix32 = linalg::Matrix<f32>;
/// One `f64` sub-network (weights, gradient and velocity buffers).
pub type MlpParams = nn::MlpParams<f64>;
/// `f64` combination-layer parameters of the kWTA ensemble.
pub type CombinerParams = nn::CombinerParams<f64>;
/// `f64` ensemble model over any of the four families.
pub type EnsembleModel = ensemble::EnsembleModel<f64>;
/// Output of one `f64` ensemble forward pass.
pub type ModelOutput = ensemble::ModelOutput<f64>;
