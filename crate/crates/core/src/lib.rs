//! Decentralized pipelined SGD.
//!
//! The crate is split along the lines of a training cluster:
//!
//! * [`numerics`]: models, softmax cross-entropy loss, analytic gradients,
//!   minibatch sampling and dataset loaders. Generic over [`Scalar`] so the
//!   same code runs in `f32` for training and `f64` for gradient checks.
//! * [`compression`]: the lightweight gradient codecs used inside AllReduce.
//! * [`collective`]: transports plus ring AllReduce, star gather/broadcast
//!   and barrier.
//! * [`timing`]: closed-form runtime predictions for synchronous and
//!   pipelined training.
//! * [`engine`]: the PS-Sync, D-Sync and Pipe-SGD worker loops.

pub mod collective;
pub mod compression;
pub mod engine;
pub mod numerics;
pub mod scalar;
pub mod timing;

pub use scalar::Scalar;

/// Flat gradient / parameter vector as exchanged between workers.
pub type GradVec = numerics::Vector<f32>;
/// Training dataset in wire precision.
pub type Dataset = numerics::Dataset<f32>;
/// Stage durations in seconds.
pub type StageTimes = timing::StageTimes<f64>;
/// Cluster cost-model parameters in seconds / bytes.
pub type ClusterParams = timing::ClusterParams<f64>;
