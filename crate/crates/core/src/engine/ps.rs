use super::trace::{Lane, Recorder, Stage};
use super::worker::{IterationRecord, Trainer, WorkerContext, WorkerOutcome};
use super::EngineError;
use crate::collective::{barrier, broadcast_from_root, gather_to_root, Transport};
use crate::numerics::sgd_update;
use crate::GradVec;

/// Parameter-server baseline, worker side. The transport has `p + 1`
/// endpoints and the server is the last rank. Gradients travel
/// uncompressed; the codec setting does not apply.
pub fn run_ps_worker<T: Transport + ?Sized>(ctx: WorkerContext<'_>, transport: &T) -> Result<WorkerOutcome, EngineError> {
    let config = ctx.config;
    let (rank, server) = (transport.rank(), server_rank(transport)?);
    if rank == server {
        return Err(EngineError::Config("the last rank is the server".into()));
    }
    config.validate(server, ctx.data.num_samples())?;
    let mut trainer = Trainer::new(ctx, rank, server);
    let mut rec = Recorder::new(rank, Lane::Compute, ctx.origin);
    let mut records = Vec::with_capacity(config.iterations as usize);
    let start = rec.now_ns();
    barrier(transport, 0)?;
    rec.push(Stage::Barrier, 0, start, None, false);

    for t in 1..=config.iterations {
        let (loss, grad) = trainer.gradient(t, &mut rec)?;
        let start = rec.now_ns();
        gather_to_root(&grad, server, transport, t as u32)?;
        let params = broadcast_from_root(None, server, transport, t as u32)?;
        rec.push(Stage::Allreduce, t, start, None, false);
        trainer.params = GradVec::new(params)?;
        trainer.maybe_snapshot(t);
        records.push(IterationRecord { iteration: t, end_ns: rec.now_ns(), loss });
    }
    let finished = rec.now_ns();
    Ok(trainer.finish(rec.events, records, finished))
}

/// Parameter-server baseline, server side: sum the workers' gradients,
/// apply the mean and broadcast the new parameters.
pub fn run_ps_server<T: Transport + ?Sized>(ctx: WorkerContext<'_>, transport: &T) -> Result<WorkerOutcome, EngineError> {
    let config = ctx.config;
    let server = server_rank(transport)?;
    if transport.rank() != server {
        return Err(EngineError::Config("server must be the last rank".into()));
    }
    let workers = server;
    config.validate(workers, ctx.data.num_samples())?;
    let mut rec = Recorder::new(server, Lane::Compute, ctx.origin);
    let mut params = ctx.init.clone();
    let zeros = vec![0.0f32; params.len()];
    let start = rec.now_ns();
    barrier(transport, 0)?;
    rec.push(Stage::Barrier, 0, start, None, false);

    for t in 1..=config.iterations {
        let start = rec.now_ns();
        let sum = gather_to_root(&zeros, server, transport, t as u32)?
            .ok_or_else(|| EngineError::Config("gather returned nothing at the root".into()))?;
        rec.push(Stage::Idle, t, start, None, false);
        let start = rec.now_ns();
        let mean = super::aggregate_semantics(GradVec::new(sum)?, workers);
        params = sgd_update(&params, &mean, config.learning_rate_at(t))?;
        rec.push(Stage::Update, t, start, Some(t as i64), false);
        rec.span(Stage::Allreduce, t, || broadcast_from_root(Some(&params), server, transport, t as u32))?;
    }
    let finished = rec.now_ns();
    Ok(WorkerOutcome { rank: server, params, trace: rec.events, records: Vec::new(), snapshots: Vec::new(), finished_ns: finished })
}

fn server_rank<T: Transport + ?Sized>(transport: &T) -> Result<usize, EngineError> {
    match transport.peers() {
        0 | 1 => Err(EngineError::Config("parameter server needs at least one worker plus the server".into())),
        n => Ok(n - 1),
    }
}
