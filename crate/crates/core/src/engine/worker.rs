use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::buffer::{Aggregated, GradientBuffer, Mailbox};
use super::config::{AllreduceKind, RunConfig};
use super::schedule::Schedule;
use super::trace::{Lane, Recorder, Stage, TraceEvent};
use super::EngineError;
use super::sched::IdlePriority;
use crate::collective::{barrier, pipelined_allreduce_blocks, ring_allreduce_blocks, BlockPartition, Transport};
use crate::compression::{compress, decompress_into, CompressedBlock};
use crate::numerics::{sample_minibatch_from, sgd_update, ModelSpec};
use crate::{Dataset, GradVec};

/// Everything a worker needs besides its transport.
#[derive(Clone, Copy, Debug)]
pub struct WorkerContext<'a> {
    pub config: &'a RunConfig,
    pub model: &'a ModelSpec,
    pub data: &'a Dataset,
    /// Shared starting point `w[0]`.
    pub init: &'a GradVec,
    /// Common clock origin for trace timestamps.
    pub origin: Instant,
    /// Keep parameter snapshots on every rank, not just rank 0.
    pub snapshot_all_ranks: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: u64,
    /// When the compute side finished the iteration.
    pub end_ns: u64,
    /// Minibatch loss at the parameters the iteration used.
    pub loss: f32,
}

#[derive(Clone, Debug)]
pub struct WorkerOutcome {
    pub rank: usize,
    pub params: GradVec,
    pub trace: Vec<TraceEvent>,
    pub records: Vec<IterationRecord>,
    /// `(iteration, params after that iteration's update)` every
    /// `eval_interval` iterations; rank 0 only unless the context asks
    /// for all ranks.
    pub snapshots: Vec<(u64, GradVec)>,
    /// Time the last update was applied.
    pub finished_ns: u64,
}

/// Turns an AllReduce sum into the mean over workers.
pub fn aggregate_semantics(sum: GradVec, p: usize) -> GradVec {
    assert!(p >= 1, "need at least one worker");
    if p == 1 {
        return sum;
    }
    let p = p as f32;
    let mut v = sum.into_vec();
    v.iter_mut().for_each(|x| *x /= p);
    GradVec::new(v).expect("mean of finite values is finite")
}

/// Minibatch sampler of one rank: ChaCha8 seeded with the run seed, one
/// stream per rank. Each rank samples from its shard `i % p == rank`.
pub fn worker_rng(seed: u64, rank: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rank as u64 + 1);
    rng
}

/// Per-worker training state shared by every mode.
pub(crate) struct Trainer<'a> {
    pub(crate) ctx: WorkerContext<'a>,
    pub(crate) rank: usize,
    pub(crate) workers: usize,
    pool: Vec<usize>,
    rng: ChaCha8Rng,
    pub(crate) params: GradVec,
    pub(crate) snapshots: Vec<(u64, GradVec)>,
}

impl<'a> Trainer<'a> {
    pub(crate) fn new(ctx: WorkerContext<'a>, rank: usize, workers: usize) -> Self {
        let rng = worker_rng(ctx.config.seed, rank);
        Trainer {
            ctx,
            rank,
            workers,
            pool: ctx.data.shard_indices(rank, workers),
            rng,
            params: ctx.init.clone(),
            snapshots: Vec::new(),
        }
    }

    /// Minibatch loss and mean gradient at the current parameters.
    pub(crate) fn gradient(&mut self, t: u64, rec: &mut Recorder) -> Result<(f32, GradVec), EngineError> {
        let batch = sample_minibatch_from(&self.pool, self.ctx.config.batch_size, &mut self.rng)?;
        let (model, data, params) = (self.ctx.model, self.ctx.data, &self.params);
        let pass = rec.span(Stage::Forward, t, || model.forward(params, data, &batch))?;
        let loss = pass.loss();
        let grad = rec.span(Stage::Backward, t, || model.backward(params, &pass))?;
        Ok((loss, grad))
    }

    /// `w -= lr(tag) * sum / p`.
    pub(crate) fn apply(&mut self, tag: i64, sum: Vec<f32>) -> Result<(), EngineError> {
        let mean = aggregate_semantics(GradVec::new(sum)?, self.workers);
        let lr = self.ctx.config.learning_rate_at(tag.max(0) as u64);
        self.params = sgd_update(&self.params, &mean, lr)?;
        Ok(())
    }

    pub(crate) fn maybe_snapshot(&mut self, t: u64) {
        let every = self.ctx.config.eval_interval;
        if every > 0 && t % every == 0 && (self.rank == 0 || self.ctx.snapshot_all_ranks) {
            self.snapshots.push((t, self.params.clone()));
        }
    }

    pub(crate) fn finish(self, trace: Vec<TraceEvent>, records: Vec<IterationRecord>, finished_ns: u64) -> WorkerOutcome {
        WorkerOutcome { rank: self.rank, params: self.params, trace, records, snapshots: self.snapshots, finished_ns }
    }
}

/// Decode, update and record one consumed slot.
fn consume(
    trainer: &mut Trainer<'_>,
    rec: &mut Recorder,
    iteration: u64,
    tag: i64,
    slot: Aggregated,
) -> Result<(), EngineError> {
    let n = trainer.params.len();
    let sum = rec.span(Stage::Decompress, iteration, || slot.decode(n))?;
    let zero = sum.is_none();
    let start = rec.now_ns();
    if let Some(sum) = sum {
        trainer.apply(tag, sum)?;
    }
    rec.push(Stage::Update, iteration, start, Some(tag), zero);
    Ok(())
}

fn compress_blocks(grad: &[f32], partition: &BlockPartition, config: &RunConfig) -> Result<Vec<CompressedBlock>, EngineError> {
    partition.blocks().map(|r| compress(&grad[r], config.codec).map_err(EngineError::from)).collect()
}

fn allreduce<T: Transport + ?Sized>(
    blocks: &[CompressedBlock],
    len: usize,
    transport: &T,
    config: &RunConfig,
    t: u64,
) -> Result<Vec<CompressedBlock>, EngineError> {
    // Global synchronization first, so the ring starts together on every
    // rank instead of inheriting compute skew.
    barrier(transport, t as u32)?;
    let mut local = vec![0.0f32; len];
    let mut at = 0;
    for b in blocks {
        decompress_into(b, &mut local[at..at + b.n_elems()])?;
        at += b.n_elems();
    }
    let out = match config.allreduce {
        AllreduceKind::Ring => ring_allreduce_blocks(&local, transport, config.codec, t as u32)?,
        AllreduceKind::Pipelined { chunks } => {
            pipelined_allreduce_blocks(&local, transport, config.codec, t as u32, chunks)?
        }
    };
    Ok(out)
}

fn start_barrier<T: Transport + ?Sized>(transport: &T, rec: &mut Recorder) -> Result<(), EngineError> {
    let start = rec.now_ns();
    barrier(transport, 0)?;
    rec.push(Stage::Barrier, 0, start, None, false);
    Ok(())
}

/// Sequential decentralized SGD: update with `g[t-1]`, forward, backward,
/// compress, AllReduce.
pub fn run_d_sync_worker<T: Transport + ?Sized>(ctx: WorkerContext<'_>, transport: &T) -> Result<WorkerOutcome, EngineError> {
    let config = ctx.config;
    let (rank, p) = (transport.rank(), transport.peers());
    config.validate(p, ctx.data.num_samples())?;
    let mut trainer = Trainer::new(ctx, rank, p);
    let partition = BlockPartition::new(trainer.params.len(), p);
    let mut rec = Recorder::new(rank, Lane::Compute, ctx.origin);
    let mut records = Vec::with_capacity(config.iterations as usize);
    start_barrier(transport, &mut rec)?;

    let mut pending = Aggregated::Zero;
    for t in 1..=config.iterations {
        let priority = IdlePriority::enter(config.prioritize_comm);
        let slot = std::mem::replace(&mut pending, Aggregated::Zero);
        consume(&mut trainer, &mut rec, t, t as i64 - 1, slot)?;
        trainer.maybe_snapshot(t);
        let (loss, grad) = trainer.gradient(t, &mut rec)?;
        let blocks = rec.span(Stage::Compress, t, || compress_blocks(&grad, &partition, config))?;
        drop(priority);
        let reduced = rec.span(Stage::Allreduce, t, || allreduce(&blocks, grad.len(), transport, config, t))?;
        pending = Aggregated::Blocks(reduced);
        records.push(IterationRecord { iteration: t, end_ns: rec.now_ns(), loss });
    }
    let last = config.iterations;
    consume(&mut trainer, &mut rec, last + 1, last as i64, pending)?;
    let finished = rec.now_ns();
    Ok(trainer.finish(rec.events, records, finished))
}

/// Pipelined SGD with a compute thread and a communication thread.
///
/// The compute thread's update at `t` waits for the aggregated gradient of
/// `t - K` (or `t - 1` during warm-up). Gradient tags still outstanding
/// after iteration `T` are applied afterwards, one per trace iteration
/// `tag + K`, so every computed gradient is used exactly once.
pub fn run_pipe_sgd_worker<T: Transport + ?Sized>(ctx: WorkerContext<'_>, transport: &T) -> Result<WorkerOutcome, EngineError> {
    let config = ctx.config;
    let (rank, p) = (transport.rank(), transport.peers());
    config.validate(p, ctx.data.num_samples())?;
    let schedule = Schedule::new(config, ctx.data.num_samples(), p);
    let buffer = GradientBuffer::new(config.k.max(1));
    for tag in schedule.initial_zero_tags() {
        buffer.put_zero(tag)?;
    }
    let mailbox: Mailbox<Vec<CompressedBlock>> = Mailbox::new();
    let n = ctx.init.len();

    let mut start_rec = Recorder::new(rank, Lane::Compute, ctx.origin);
    start_barrier(transport, &mut start_rec)?;

    let abort_all = || {
        buffer.abort();
        mailbox.abort();
        transport.abort();
    };

    std::thread::scope(|scope| {
        let comm = scope.spawn(|| {
            let mut rec = Recorder::new(rank, Lane::Comm, ctx.origin);
            let result = (|| {
                for t in 1..=config.iterations {
                    let start = rec.now_ns();
                    let local = mailbox.take(t)?;
                    rec.push(Stage::Idle, t, start, None, false);
                    let reduced = rec.span(Stage::Allreduce, t, || allreduce(&local, n, transport, config, t))?;
                    buffer.put(t as i64, Aggregated::Blocks(reduced))?;
                }
                Ok::<(), EngineError>(())
            })();
            if result.is_err() {
                abort_all();
            }
            (result, rec.events)
        });

        // Set after spawning so the comm thread keeps normal priority.
        let _priority = IdlePriority::enter(config.prioritize_comm);
        let mut rec = start_rec;
        let mut trainer = Trainer::new(ctx, rank, p);
        let mut records = Vec::with_capacity(config.iterations as usize);
        let partition = BlockPartition::new(n, p);
        let compute = (|| {
            for t in 1..=config.iterations {
                let dep = schedule.dependency(t);
                let start = rec.now_ns();
                let slot = buffer.take(dep.tag)?;
                rec.push(Stage::Idle, t, start, None, false);
                consume(&mut trainer, &mut rec, t, dep.tag, slot)?;
                for tag in schedule.zero_tags_after(t) {
                    buffer.put_zero(tag)?;
                }
                trainer.maybe_snapshot(t);
                let (loss, grad) = trainer.gradient(t, &mut rec)?;
                let blocks = rec.span(Stage::Compress, t, || compress_blocks(&grad, &partition, config))?;
                let start = rec.now_ns();
                mailbox.put(t, blocks)?;
                rec.push(Stage::Idle, t, start, None, false);
                records.push(IterationRecord { iteration: t, end_ns: rec.now_ns(), loss });
            }
            let last = config.iterations;
            let first_pending = schedule.dependency(last).tag + 1;
            let k = schedule.final_k(last) as i64;
            for tag in first_pending.max(1)..=last as i64 {
                let iteration = (tag + k) as u64;
                let start = rec.now_ns();
                let slot = buffer.take(tag)?;
                rec.push(Stage::Idle, iteration, start, None, false);
                consume(&mut trainer, &mut rec, iteration, tag, slot)?;
            }
            Ok::<(), EngineError>(())
        })();
        if compute.is_err() {
            abort_all();
        }
        let (comm_result, comm_events) = comm.join().map_err(|_| EngineError::Panicked(rank))?;
        pick_error(compute, comm_result)?;
        let finished = rec.now_ns();
        let mut events = rec.events;
        events.extend(comm_events);
        Ok(trainer.finish(events, records, finished))
    })
}

/// Prefer the root cause over the `Aborted` it triggered elsewhere.
pub(crate) fn pick_error(a: Result<(), EngineError>, b: Result<(), EngineError>) -> Result<(), EngineError> {
    match (a, b) {
        (Ok(()), Ok(())) => Ok(()),
        (Err(EngineError::Aborted), Err(e)) | (Err(e), _) | (Ok(()), Err(e)) => Err(e),
    }
}
