use std::time::{Duration, Instant};

use super::config::{Mode, RunConfig};
use super::ps::{run_ps_server, run_ps_worker};
use super::worker::{pick_error, run_d_sync_worker, run_pipe_sgd_worker, WorkerContext, WorkerOutcome};
use super::EngineError;
use crate::collective::{InProcNetwork, LinkModel, Transport};
use crate::numerics::ModelSpec;
use crate::{Dataset, GradVec};

/// Results of a whole in-process cluster.
#[derive(Clone, Debug)]
pub struct ClusterRun {
    /// Worker outcomes ordered by rank.
    pub workers: Vec<WorkerOutcome>,
    /// Parameter server, for `ps_sync`.
    pub server: Option<WorkerOutcome>,
    /// Launch to the last worker's final update.
    pub elapsed: Duration,
}

impl ClusterRun {
    pub fn params(&self) -> &GradVec {
        &self.workers[0].params
    }
}

/// Runs the worker loop `config.mode` selects. For `ps_sync` the last rank
/// runs the server.
pub fn run_worker<T: Transport + ?Sized>(ctx: WorkerContext<'_>, transport: &T) -> Result<WorkerOutcome, EngineError> {
    match ctx.config.mode {
        Mode::PipeSgd => run_pipe_sgd_worker(ctx, transport),
        Mode::DSync => run_d_sync_worker(ctx, transport),
        Mode::PsSync if transport.rank() + 1 == transport.peers() => run_ps_server(ctx, transport),
        Mode::PsSync => run_ps_worker(ctx, transport),
    }
}

/// Runs `workers` ranks as threads connected by an in-process network.
/// Every rank keeps parameter snapshots.
pub fn run_inproc(
    config: &RunConfig,
    workers: usize,
    model: &ModelSpec,
    data: &Dataset,
    link: LinkModel,
) -> Result<ClusterRun, EngineError> {
    run_inproc_with(config, workers, model, data, link, true)
}

/// [`run_inproc`] with snapshots optionally limited to rank 0.
pub fn run_inproc_with(
    config: &RunConfig,
    workers: usize,
    model: &ModelSpec,
    data: &Dataset,
    link: LinkModel,
    snapshot_all_ranks: bool,
) -> Result<ClusterRun, EngineError> {
    config.validate(workers, data.num_samples())?;
    if model.input_dim() != data.dim() || model.num_classes() < data.num_classes() {
        return Err(EngineError::Config("model does not match the dataset".into()));
    }
    let init = model.init_params::<f32>(config.seed);
    let endpoints = if config.mode == Mode::PsSync {
        InProcNetwork::build(workers + 1, link)
    } else {
        InProcNetwork::build(workers, link)
    };
    let origin = Instant::now();
    let ctx = WorkerContext { config, model, data, init: &init, origin, snapshot_all_ranks };

    let results: Vec<Result<WorkerOutcome, EngineError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = endpoints
            .iter()
            .map(|ep| {
                scope.spawn(move || {
                    let out = run_worker(ctx, ep);
                    if out.is_err() {
                        ep.abort();
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(rank, h)| h.join().unwrap_or(Err(EngineError::Panicked(rank))))
            .collect()
    });

    let mut first = Ok(());
    let mut outcomes = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => first = pick_error(first, Err(e)),
        }
    }
    first?;
    let server = if config.mode == Mode::PsSync { outcomes.pop() } else { None };
    let end = outcomes.iter().chain(&server).map(|o| o.finished_ns).max().unwrap_or(0);
    Ok(ClusterRun { workers: outcomes, server, elapsed: Duration::from_nanos(end) })
}
