//! Training loops.
//!
//! * Pipe-SGD: two threads per worker. The compute thread's update at
//!   iteration `t` consumes the aggregated gradient of iteration `t - K`
//!   while the communication thread runs the AllReduce of earlier
//!   iterations.
//! * D-Sync: update, compute, AllReduce strictly in sequence.
//! * PS-Sync: workers send gradients to a server rank that updates and
//!   broadcasts the parameters.
//!
//! The aggregated sum is divided by the worker count before the update, so
//! the learning rate means the same thing for every cluster size.

mod buffer;
pub mod checkpoint;
mod config;
mod launch;
mod ps;
mod sched;
mod schedule;
pub mod trace;
mod worker;

pub use buffer::{Aggregated, GradientBuffer, Mailbox};
pub use config::{iterations_per_epoch, warmup_controller, AllreduceKind, Mode, RunConfig, StepDecay};
pub use launch::{run_inproc, run_inproc_with, run_worker, ClusterRun};
pub use ps::{run_ps_server, run_ps_worker};
pub use schedule::{Dependency, Schedule};
pub use trace::{Lane, Stage, TraceEvent};
pub use worker::{aggregate_semantics, run_d_sync_worker, run_pipe_sgd_worker, worker_rng, IterationRecord, WorkerContext, WorkerOutcome};

use thiserror::Error;

use crate::collective::CollectiveError;
use crate::compression::CodecError;
use crate::numerics::NumericsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error("gradient buffer: {0}")]
    Buffer(String),
    #[error("run aborted")]
    Aborted,
    #[error("worker {0} panicked")]
    Panicked(usize),
}
