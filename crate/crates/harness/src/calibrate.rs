//! Microbenchmarks that turn a configuration into timing-model inputs.
//!
//! Compute stages are timed with every worker running the same operation at
//! once (barrier-synchronized rounds, median round time), because that is
//! what an iteration looks like when workers share a machine. Network
//! parameters come from ring-shift floods, barriers and real AllReduces on
//! the configured transport, including any injected delays.

use std::hint::black_box;
use std::sync::{Barrier, Mutex};
use std::time::{Duration, Instant};

use pipesgd_core::collective::{
    barrier, ring_allreduce, BlockPartition, InProcNetwork, TcpEndpoint, Transport, DEFAULT_RECV_TIMEOUT, FRAME_HEADER_LEN,
};
use pipesgd_core::collective::{Frame, MsgType};
use pipesgd_core::compression::{compress, decompress_into, payload_size, CodecId, CompressedBlock};
use pipesgd_core::engine::{worker_rng, Mode};
use pipesgd_core::numerics::{sample_minibatch_from, sgd_update, ModelSpec};
use pipesgd_core::timing::ring_comm_time;
use pipesgd_core::{ClusterParams, Dataset, GradVec, StageTimes};

use crate::config::{ExperimentConfig, KeyValues, TransportChoice};
use crate::keepalive::KeepAwake;
use crate::experiment::{build_model, load_data};
use crate::HarnessError;

/// Minimum repetitions per probe.
pub const MIN_REPS: usize = 20;
const WARMUP_REPS: usize = 2;
const BANDWIDTH_PROBE_MIN: usize = 64 << 10;
const BANDWIDTH_PROBE_MAX: usize = 4 << 20;
/// Model-sized buffers an AllReduce touches per worker: input, encoded
/// blocks, received blocks, output.
const CHURN_COPIES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub stages: StageTimes,
    pub cluster: ClusterParams,
    pub codec: CodecId,
    pub reps: usize,
}

impl Calibration {
    /// Pairs readable by `predict` and `compare`.
    pub fn to_pairs(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let (s, c) = (&self.stages, &self.cluster);
        kv.set("codec", self.codec);
        kv.set("update", s.update);
        kv.set("forward", s.forward);
        kv.set("backward", s.backward);
        kv.set("first_segment_backward", s.first_segment_backward);
        kv.set("comm", s.comm);
        kv.set("workers", c.workers);
        kv.set("alpha", c.alpha);
        kv.set("beta", c.beta);
        kv.set("gamma_red", c.gamma_red);
        kv.set("sync", c.sync);
        kv.set("model_bytes", c.model_bytes);
        kv.set("segments", c.segments);
        kv
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Median time of rounds in which `threads` threads run `op(rank, rep)`
/// simultaneously.
fn median_round<F: Fn(usize, usize) + Sync>(threads: usize, reps: usize, op: F) -> f64 {
    median_round_with(threads, reps, |_| {}, op)
}

/// Like `median_round`, with an untimed `prep(rank)` before each round.
fn median_round_with<P, F>(threads: usize, reps: usize, prep: P, op: F) -> f64
where
    P: Fn(usize) + Sync,
    F: Fn(usize, usize) + Sync,
{
    let start = Barrier::new(threads);
    let end = Barrier::new(threads);
    let times = Mutex::new(Vec::with_capacity(reps));
    std::thread::scope(|s| {
        for rank in 0..threads {
            let (start, end, times, prep, op) = (&start, &end, &times, &prep, &op);
            s.spawn(move || {
                for rep in 0..reps + WARMUP_REPS {
                    prep(rank);
                    start.wait();
                    let t0 = Instant::now();
                    op(rank, rep);
                    end.wait();
                    if rank == 0 && rep >= WARMUP_REPS {
                        times.lock().unwrap().push(t0.elapsed().as_secs_f64());
                    }
                }
            });
        }
    });
    median(times.into_inner().unwrap())
}

fn compress_blocks(grad: &[f32], partition: &BlockPartition, codec: CodecId) -> Vec<CompressedBlock> {
    partition.blocks().map(|r| compress(&grad[r], codec).expect("finite gradient")).collect()
}

/// Stage times of one iteration with `threads` workers sharing the host.
pub fn measure_stages(
    model: &ModelSpec,
    data: &Dataset,
    params: &GradVec,
    batch_size: usize,
    codec: CodecId,
    workers: usize,
    threads: usize,
    reps: usize,
) -> Result<StageTimes, HarnessError> {
    let n = params.len();
    let partition = BlockPartition::new(n, workers);
    let err = |e: pipesgd_core::numerics::NumericsError| HarnessError::Config(e.to_string());
    let mut batches = Vec::with_capacity(threads);
    for rank in 0..threads {
        let pool = data.shard_indices(rank % workers, workers);
        let mut rng = worker_rng(0x5eed, rank);
        let b: Vec<_> = (0..4).map(|_| sample_minibatch_from(&pool, batch_size, &mut rng)).collect::<Result<_, _>>().map_err(err)?;
        batches.push(b);
    }
    // Each worker owns its parameters; sharing one copy would flatter the cache.
    let replicas: Vec<GradVec> = (0..threads).map(|_| params.clone()).collect();
    let passes: Vec<_> = batches.iter().zip(&replicas).map(|(b, w)| model.forward(w, data, &b[0])).collect::<Result<_, _>>().map_err(err)?;
    let grads: Vec<GradVec> = passes.iter().zip(&replicas).map(|(p, w)| model.backward(w, p)).collect::<Result<_, _>>().map_err(err)?;
    let aggregated: Vec<Vec<CompressedBlock>> = grads.iter().map(|g| compress_blocks(g, &partition, codec)).collect();

    let forward = median_round(threads, reps, |r, rep| {
        black_box(model.forward(&replicas[r], data, &batches[r][rep % 4]).unwrap().loss());
    });
    let backward = median_round(threads, reps, |r, _| {
        let g = model.backward(&replicas[r], &passes[r]).unwrap();
        black_box(compress_blocks(&g, &partition, codec));
    });
    let apply = |r: usize| {
        let mut sum = vec![0.0f32; n];
        let mut at = 0;
        for b in &aggregated[r] {
            decompress_into(b, &mut sum[at..at + b.n_elems()]).unwrap();
            at += b.n_elems();
        }
        let scale = 1.0 / workers as f32;
        sum.iter_mut().for_each(|v| *v *= scale);
        black_box(sgd_update(&replicas[r], &sum, 0.01).unwrap());
    };
    let update = median_round(threads, reps, |r, _| apply(r));

    // Back-to-back stage rounds run with warm caches. In training every
    // iteration starts after an AllReduce has streamed several model-sized
    // buffers through them, so time one whole cold iteration too and scale
    // the stages to match it.
    let churn: Vec<Mutex<Vec<f32>>> = (0..threads).map(|_| Mutex::new(vec![0.0f32; CHURN_COPIES * n])).collect();
    let whole = median_round_with(
        threads,
        reps,
        |r| {
            let mut c = churn[r].lock().unwrap();
            c.iter_mut().for_each(|v| *v += 1.0);
            black_box(&*c);
        },
        |r, rep| {
            let pass = model.forward(&replicas[r], data, &batches[r][rep % 4]).unwrap();
            let g = model.backward(&replicas[r], &pass).unwrap();
            black_box(compress_blocks(&g, &partition, codec));
            apply(r);
        },
    );
    let parts = forward + backward + update;
    let scale = if parts > 0.0 { (whole / parts).max(1.0) } else { 1.0 };
    let (forward, backward, update) = (forward * scale, backward * scale, update * scale);
    let mut stages = StageTimes::new(update, forward, backward, 0.0);
    // The last layer's gradient is the first segment ready; assume backward
    // time is proportional to parameter count.
    let last = model.param_layout().iter().filter(|b| b.layer + 1 == model.num_layers()).map(|b| b.len).sum::<usize>();
    stages.first_segment_backward = backward * last as f64 / n as f64;
    Ok(stages)
}

/// What the network probes measured, in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkProbe {
    pub alpha: f64,
    pub beta: f64,
    pub sync: f64,
    /// Median ring AllReduce of the full model with the run's codec.
    pub allreduce: f64,
}

/// Network parameters seen by rank 0.
///
/// Every rank of the cluster must call this. Latency and throughput come
/// from ring-shift floods: all ranks send to their successor at once, for
/// as many steps as a ring AllReduce takes, so per-step costs include the
/// contention the collective itself sees. The last rank times barriers and
/// reports the median to rank 0, since it is the last to be released.
/// Finally every rank runs real AllReduces of `n_elems` values.
pub fn probe_network<T: Transport + ?Sized>(
    ep: &T,
    reps: usize,
    probe_bytes: usize,
    n_elems: usize,
    codec: CodecId,
) -> Result<Option<NetworkProbe>, HarnessError> {
    let (rank, p) = (ep.rank(), ep.peers());
    if p == 1 {
        return Ok(Some(NetworkProbe { alpha: 0.0, beta: 0.0, sync: 0.0, allreduce: 0.0 }));
    }
    let transport = |e: pipesgd_core::collective::TransportError| HarnessError::Transport(format!("probe: {e}"));
    let (succ, pred) = ((rank + 1) % p, (rank + p - 1) % p);
    let steps = 2 * (p - 1);
    let ring_shift = |bytes: usize, base: u32| -> Result<f64, HarnessError> {
        let mut per_step = Vec::with_capacity(reps);
        for rep in 0..reps + WARMUP_REPS {
            let tag = base + rep as u32;
            barrier(ep, tag)?;
            let t0 = Instant::now();
            for _ in 0..steps {
                ep.send(succ, Frame::data(tag, 0, vec![0u8; bytes])).map_err(transport)?;
                expect(ep, pred, tag, bytes)?;
            }
            if rep >= WARMUP_REPS {
                per_step.push(t0.elapsed().as_secs_f64() / steps as f64);
            }
        }
        Ok(median(per_step))
    };
    let step_small = ring_shift(0, 1_000)?;
    let step_big = ring_shift(probe_bytes, 2_000)?;
    barrier(ep, 3)?;
    let mut waits = Vec::with_capacity(reps);
    for rep in 0..reps + WARMUP_REPS {
        let t0 = Instant::now();
        barrier(ep, 3_000 + rep as u32)?;
        if rep >= WARMUP_REPS {
            waits.push(t0.elapsed().as_secs_f64());
        }
    }
    // Values shaped like a gradient, so compression does real work.
    let values: Vec<f32> = (0..n_elems).map(|i| ((i as f32) * 0.618).sin() * 1e-2).collect();
    let mut allreduce = Vec::with_capacity(reps);
    for rep in 0..reps + WARMUP_REPS {
        let tag = 5_000 + rep as u32;
        barrier(ep, tag)?;
        let t0 = Instant::now();
        ring_allreduce(&values, ep, codec, tag)?;
        if rep >= WARMUP_REPS {
            allreduce.push(t0.elapsed().as_secs_f64());
        }
    }
    let last = p - 1;
    if rank == last {
        let m = median(waits);
        ep.send(0, Frame::control(3, m.to_le_bytes().to_vec())).map_err(transport)?;
        return Ok(None);
    }
    if rank != 0 {
        return Ok(None);
    }
    let frame = ep.recv(last).map_err(transport)?;
    if frame.msg_type != MsgType::Control || frame.payload.len() != 8 {
        return Err(HarnessError::Transport("probe: malformed barrier report".into()));
    }
    let barrier_time = f64::from_le_bytes(frame.payload[..].try_into().unwrap());
    let alpha = step_small;
    let beta = ((step_big - alpha) / (probe_bytes + FRAME_HEADER_LEN) as f64).max(0.0);
    // Each AllReduce starts with this barrier, so S is its full cost.
    Ok(Some(NetworkProbe { alpha, beta, sync: barrier_time, allreduce: median(allreduce) }))
}

fn expect<T: Transport + ?Sized>(ep: &T, src: usize, tag: u32, bytes: usize) -> Result<(), HarnessError> {
    let f = ep.recv(src).map_err(|e| HarnessError::Transport(format!("probe: {e}")))?;
    if f.msg_type != MsgType::Data || f.iteration != tag || f.payload.len() != bytes {
        return Err(HarnessError::Transport(format!("probe: unexpected frame from rank {src}")));
    }
    Ok(())
}

/// Calibrates the configured cluster. For TCP every rank must run this;
/// only rank 0 gets `Some`.
pub fn calibrate(config: &ExperimentConfig, reps: usize) -> Result<Option<Calibration>, HarnessError> {
    config.validate()?;
    let reps = reps.max(MIN_REPS);
    let (train, _) = load_data(config)?;
    let model = build_model(config, &train)?;
    let p = config.workers;
    // The parameter server exchanges raw gradients.
    let codec = if config.run.mode == Mode::PsSync { CodecId::None } else { config.run.codec };
    let n = model.num_params();
    let model_bytes = payload_size(codec, n);
    // One ring block.
    let probe_bytes = payload_size(codec, n.div_ceil(p)).clamp(BANDWIDTH_PROBE_MIN, BANDWIDTH_PROBE_MAX);
    // Same environment as the runs being predicted.
    let _awake = KeepAwake::start(config.keep_cpu_awake);

    let (net, threads) = match &config.transport {
        TransportChoice::InProc => {
            let endpoints = InProcNetwork::build(p, config.link());
            let results: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = endpoints.iter().map(|ep| s.spawn(move || probe_network(ep, reps, probe_bytes, n, codec))).collect();
                handles.into_iter().map(|h| h.join().expect("probe thread panicked")).collect()
            });
            let mut first = None;
            for r in results {
                if let Some(v) = r? {
                    first = Some(v);
                }
            }
            (first, p)
        }
        TransportChoice::Tcp { roster, rank } => {
            let mut ep = TcpEndpoint::connect(*rank, roster, DEFAULT_RECV_TIMEOUT)
                .map_err(|e| HarnessError::Transport(format!("connecting rank {rank}: {e}")))?;
            ep.set_link_model(config.link());
            // Each host computes on its own, so no shared-core contention.
            (probe_network(&ep, reps, probe_bytes, n, codec)?, 1)
        }
    };
    let Some(net) = net else {
        return Ok(None);
    };

    let params = model.init_params::<f32>(config.run.seed);
    let mut stages = measure_stages(&model, &train, &params, config.run.batch_size, codec, p, threads, reps)?;
    // Whatever the real AllReduce costs beyond latency, transfer and
    // synchronization is per-byte processing: decode, sum, re-encode, copy.
    let mut cluster = ClusterParams {
        workers: p,
        alpha: net.alpha,
        beta: net.beta,
        gamma_red: 0.0,
        sync: net.sync,
        model_bytes: model_bytes as f64,
        segments: model.num_layers(),
    };
    let frac = (p as f64 - 1.0) / p as f64 * model_bytes as f64;
    if frac > 0.0 {
        // The timed AllReduce excludes the barrier.
        let transfer = ring_comm_time(&cluster) - cluster.sync;
        cluster.gamma_red = ((net.allreduce - transfer) / frac).max(0.0);
    }

    let o = &config.overrides;
    let cluster = ClusterParams {
        alpha: o.alpha.unwrap_or(cluster.alpha),
        beta: o.beta.unwrap_or(cluster.beta),
        gamma_red: o.gamma_red.unwrap_or(cluster.gamma_red),
        sync: o.sync.unwrap_or(cluster.sync),
        segments: o.segments.unwrap_or(cluster.segments),
        ..cluster
    };
    stages.comm = ring_comm_time(&cluster);
    Ok(Some(Calibration { stages, cluster, codec, reps }))
}

/// Median one-way latency of `reps` empty messages between ranks 0 and 1
/// of a fresh in-process network.
pub fn inproc_latency(link: pipesgd_core::collective::LinkModel, reps: usize) -> Result<Duration, HarnessError> {
    let endpoints = InProcNetwork::build(2, link);
    let out: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = endpoints.iter().map(|ep| s.spawn(move || probe_network(ep, reps.max(MIN_REPS), BANDWIDTH_PROBE_MIN, 0, CodecId::None))).collect();
        handles.into_iter().map(|h| h.join().expect("probe thread panicked")).collect()
    });
    for r in out {
        if let Some(net) = r? {
            return Ok(Duration::from_secs_f64(net.alpha));
        }
    }
    Err(HarnessError::Transport("no latency measurement".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn rounds_cover_all_threads() {
        let t = median_round(3, 5, |r, _| std::thread::sleep(Duration::from_millis(2 * (r as u64 + 1))));
        assert!(t >= 0.006, "{t}");
    }
}
