//! End-to-end runs and the files they leave behind.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use pipesgd_core::collective::{TcpEndpoint, DEFAULT_RECV_TIMEOUT};
use pipesgd_core::engine::checkpoint::write_checkpoint;
use pipesgd_core::engine::trace::{self, Lane};
use pipesgd_core::engine::{
    iterations_per_epoch, run_inproc_with, run_worker, Mode, Stage, TraceEvent, WorkerContext, WorkerOutcome,
};
use pipesgd_core::numerics::idx::load_mnist;
use pipesgd_core::numerics::{evaluate_accuracy, full_loss, synthetic_blobs, ModelSpec, SyntheticSpec};
use pipesgd_core::{Dataset, GradVec};

use crate::charts;
use crate::keepalive::KeepAwake;
use crate::config::{DatasetSource, ExperimentConfig, KeyValues, ModelChoice, TransportChoice};
use crate::HarnessError;

pub const METRICS_HEADER: &str = "iteration,wall_clock_ms,train_loss,eval_accuracy";
pub const BREAKDOWN_HEADER: &str =
    "mode,update_s,compute_s,compress_s,communicate_s,idle_s,overlapped_comm_s,iteration_s,final_accuracy";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: u64,
    pub wall_clock_ms: f64,
    /// Minibatch loss averaged over the workers that reported it.
    pub train_loss: f64,
    pub eval_accuracy: Option<f64>,
}

/// Mean seconds per iteration spent in each stage, per worker, from the
/// compute thread's point of view. Communication on the separate Pipe-SGD
/// thread is reported on its own as `overlapped_comm_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct BreakdownReport {
    pub mode: Mode,
    pub update_s: f64,
    pub compute_s: f64,
    /// Compression plus decompression.
    pub compress_s: f64,
    pub communicate_s: f64,
    pub idle_s: f64,
    pub overlapped_comm_s: f64,
    pub iteration_s: f64,
    pub final_accuracy: f64,
}

impl BreakdownReport {
    pub fn components_sum(&self) -> f64 {
        self.update_s + self.compute_s + self.compress_s + self.communicate_s + self.idle_s
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.6}",
            self.mode,
            self.update_s,
            self.compute_s,
            self.compress_s,
            self.communicate_s,
            self.idle_s,
            self.overlapped_comm_s,
            self.iteration_s,
            self.final_accuracy
        )
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub metrics: Vec<MetricRow>,
    pub breakdown: BreakdownReport,
    pub trace: Vec<TraceEvent>,
    pub final_params: GradVec,
    /// Mean loss over the full training set at the final parameters.
    pub final_train_loss: f64,
    pub final_accuracy: f64,
    /// Launch to the final update.
    pub wall_clock: Duration,
    pub epochs: f64,
    pub iterations_per_epoch: u64,
    pub num_params: usize,
    /// Rank whose view this is (0 for in-process runs).
    pub rank: usize,
}

impl ExperimentResult {
    pub fn iteration_seconds(&self) -> f64 {
        self.wall_clock.as_secs_f64() / self.config.run.iterations as f64
    }
}

/// Training and evaluation sets.
pub fn load_data(config: &ExperimentConfig) -> Result<(Dataset, Dataset), HarnessError> {
    let bad = |e: pipesgd_core::numerics::NumericsError| HarnessError::Config(format!("dataset: {e}"));
    match &config.dataset {
        DatasetSource::SyntheticConvex { spec, eval_samples } => {
            let train = synthetic_blobs(spec).map_err(bad)?;
            // Same class centers (same seed), fresh draws for evaluation.
            let eval_spec = SyntheticSpec { samples: spec.samples + eval_samples, ..*spec };
            let all = synthetic_blobs(&eval_spec).map_err(bad)?;
            let eval = tail(&all, *eval_samples).map_err(bad)?;
            Ok((train, eval))
        }
        DatasetSource::Mnist { images, labels, test_images, test_labels } => {
            let train = load_mnist(images, labels).map_err(bad)?;
            let eval = match (test_images, test_labels) {
                (Some(i), Some(l)) => load_mnist(i, l).map_err(bad)?,
                _ => train.clone(),
            };
            Ok((train, eval))
        }
    }
}

fn tail(data: &Dataset, count: usize) -> Result<Dataset, pipesgd_core::numerics::NumericsError> {
    let start = data.num_samples() - count;
    let mut features = Vec::with_capacity(count * data.dim());
    for i in start..data.num_samples() {
        features.extend_from_slice(data.row(i));
    }
    Dataset::new(features, data.labels()[start..].to_vec(), data.dim(), data.num_classes())
}

pub fn build_model(config: &ExperimentConfig, data: &Dataset) -> Result<ModelSpec, HarnessError> {
    let model = match &config.model {
        ModelChoice::Logistic => ModelSpec::logistic(data.dim(), data.num_classes()),
        ModelChoice::Mlp { hidden } => {
            let mut dims = vec![data.dim()];
            dims.extend(hidden);
            dims.push(data.num_classes());
            ModelSpec::mlp(&dims)
        }
    };
    model.map_err(|e| HarnessError::Config(format!("model: {e}")))
}

/// Runs the configured experiment. In-process runs launch every rank;
/// TCP runs execute this process's rank only.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    config.validate()?;
    let (train, eval) = load_data(config)?;
    let model = build_model(config, &train)?;
    config.run.validate(config.workers, train.num_samples()).map_err(HarnessError::from)?;

    let awake = KeepAwake::start(config.keep_cpu_awake);
    let (workers, server, wall_clock, rank) = match &config.transport {
        TransportChoice::InProc => {
            let run = run_inproc_with(&config.run, config.workers, &model, &train, config.link(), false)?;
            (run.workers, run.server, run.elapsed, 0)
        }
        TransportChoice::Tcp { roster, rank } => {
            let mut ep = TcpEndpoint::connect(*rank, roster, DEFAULT_RECV_TIMEOUT)
                .map_err(|e| HarnessError::Transport(format!("connecting rank {rank}: {e}")))?;
            ep.set_link_model(config.link());
            let init = model.init_params::<f32>(config.run.seed);
            let ctx = WorkerContext {
                config: &config.run,
                model: &model,
                data: &train,
                init: &init,
                origin: Instant::now(),
                snapshot_all_ranks: true,
            };
            let out = run_worker(ctx, &ep)?;
            let elapsed = Duration::from_nanos(out.finished_ns);
            (vec![out], None, elapsed, *rank)
        }
    };

    drop(awake);

    // Evaluation happens here, after the clock has stopped.
    let lead = &workers[0];
    let final_params = lead.params.clone();
    let accuracy = |p: &GradVec| evaluate_accuracy(p, &model, &eval).map_err(|e| HarnessError::Config(e.to_string()));
    let final_accuracy = accuracy(&final_params)?;
    let final_train_loss =
        full_loss(&final_params, &model, &train).map_err(|e| HarnessError::Config(e.to_string()))? as f64;

    let t_max = config.run.iterations;
    let mut metrics = Vec::with_capacity(t_max as usize);
    let mut snapshots = lead.snapshots.iter().peekable();
    for (i, rec) in lead.records.iter().enumerate() {
        let losses: Vec<f64> = workers.iter().map(|w| w.records[i].loss as f64).collect();
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let mut eval_accuracy = None;
        while let Some((t, _)) = snapshots.peek() {
            if *t < rec.iteration {
                snapshots.next();
            } else {
                break;
            }
        }
        if rec.iteration == t_max {
            eval_accuracy = Some(final_accuracy);
        } else if let Some((t, params)) = snapshots.peek() {
            if *t == rec.iteration {
                eval_accuracy = Some(accuracy(params)?);
            }
        }
        let end_ns = if rec.iteration == t_max { wall_clock.as_nanos() as u64 } else { rec.end_ns };
        metrics.push(MetricRow { iteration: rec.iteration, wall_clock_ms: end_ns as f64 / 1e6, train_loss, eval_accuracy });
    }

    let mut trace: Vec<TraceEvent> = workers.iter().chain(&server).flat_map(|w| w.trace.iter().cloned()).collect();
    trace::sort_events(&mut trace);
    let breakdown = breakdown(config.run.mode, &workers, t_max, wall_clock, final_accuracy);
    let per_epoch = iterations_per_epoch(train.num_samples(), config.workers, config.run.batch_size);
    let epochs = t_max as f64 / per_epoch as f64;

    Ok(ExperimentResult {
        config: config.clone(),
        metrics,
        breakdown,
        trace,
        final_params,
        final_train_loss,
        final_accuracy,
        wall_clock,
        epochs,
        iterations_per_epoch: per_epoch,
        num_params: model.num_params(),
        rank,
    })
}

fn breakdown(mode: Mode, workers: &[WorkerOutcome], iterations: u64, wall: Duration, final_accuracy: f64) -> BreakdownReport {
    let per_iter = |lane: Lane, stages: &[Stage]| -> f64 {
        let total: u64 = workers
            .iter()
            .flat_map(|w| w.trace.iter())
            .filter(|e| e.lane == lane && stages.contains(&e.stage))
            .map(TraceEvent::duration_ns)
            .sum();
        total as f64 / 1e9 / iterations as f64 / workers.len() as f64
    };
    BreakdownReport {
        mode,
        update_s: per_iter(Lane::Compute, &[Stage::Update]),
        compute_s: per_iter(Lane::Compute, &[Stage::Forward, Stage::Backward]),
        compress_s: per_iter(Lane::Compute, &[Stage::Compress, Stage::Decompress]),
        communicate_s: per_iter(Lane::Compute, &[Stage::Allreduce]),
        idle_s: per_iter(Lane::Compute, &[Stage::Idle, Stage::Barrier]),
        overlapped_comm_s: per_iter(Lane::Comm, &[Stage::Allreduce]),
        iteration_s: wall.as_secs_f64() / iterations as f64,
        final_accuracy,
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let acc = r.eval_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        out.push_str(&format!("{},{:.3},{:.6},{}\n", r.iteration, r.wall_clock_ms, r.train_loss, acc));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>, HarnessError> {
    let bad = |n: usize, what: &str| HarnessError::Config(format!("metrics line {}: {what}", n + 1));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(bad(0, "unexpected header")),
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad(n, "expected 4 columns"));
        }
        rows.push(MetricRow {
            iteration: cols[0].parse().map_err(|_| bad(n, "iteration"))?,
            wall_clock_ms: cols[1].parse().map_err(|_| bad(n, "wall_clock_ms"))?,
            train_loss: cols[2].parse().map_err(|_| bad(n, "train_loss"))?,
            eval_accuracy: match cols[3].trim() {
                "" => None,
                v => Some(v.parse().map_err(|_| bad(n, "eval_accuracy"))?),
            },
        });
    }
    Ok(rows)
}

pub fn summary_pairs(result: &ExperimentResult) -> KeyValues {
    let c = &result.config;
    let mut kv = KeyValues::new();
    kv.set("mode", c.run.mode);
    kv.set("workers", c.workers);
    kv.set("codec", c.run.codec);
    kv.set("k", c.run.effective_k());
    kv.set("iterations", c.run.iterations);
    kv.set("batch_size", c.run.batch_size);
    kv.set("warmup_epochs", c.run.warmup_epochs);
    kv.set("warmup_iterations", warmup_iterations(result));
    kv.set("epochs", format!("{:.4}", result.epochs));
    kv.set("num_params", result.num_params);
    kv.set("seed", c.run.seed);
    kv.set("rank", result.rank);
    kv.set("inject_alpha_ms", c.inject_alpha_ms);
    kv.set("inject_mbps", c.inject_mbps.map(|m| m.to_string()).unwrap_or_else(|| "none".into()));
    kv.set("wall_clock_s", format!("{:.6}", result.wall_clock.as_secs_f64()));
    kv.set("iteration_s", format!("{:.9}", result.iteration_seconds()));
    kv.set("final_train_loss", format!("{:.6}", result.final_train_loss));
    kv.set("final_accuracy", format!("{:.6}", result.final_accuracy));
    kv
}

/// Iterations run synchronously before pipelining starts.
fn warmup_iterations(result: &ExperimentResult) -> u64 {
    let c = &result.config.run;
    if c.mode != Mode::PipeSgd || c.warmup_epochs == 0 {
        return 0;
    }
    (c.warmup_epochs * result.iterations_per_epoch).min(c.iterations)
}

/// Writes metrics.csv, breakdown.csv, trace.csv, summary.txt, the
/// checkpoint and charts into `dir`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir.join("charts"))?;
    if result.rank != 0 {
        let mut out = BufWriter::new(File::create(dir.join(format!("trace.rank{}.csv", result.rank)))?);
        trace::write_csv(&result.trace, &mut out)?;
        return Ok(out.flush()?);
    }
    fs::write(dir.join("metrics.csv"), metrics_csv(&result.metrics))?;
    fs::write(dir.join("breakdown.csv"), format!("{BREAKDOWN_HEADER}\n{}\n", result.breakdown.csv_row()))?;
    let mut out = BufWriter::new(File::create(dir.join("trace.csv"))?);
    trace::write_csv(&result.trace, &mut out)?;
    out.flush()?;
    fs::write(dir.join("summary.txt"), summary_pairs(result).to_text())?;
    fs::write(dir.join("config.txt"), result.config.to_pairs().to_text())?;
    let mut ckpt = BufWriter::new(File::create(dir.join("checkpoint.bin"))?);
    write_checkpoint(&mut ckpt, &result.final_params)?;
    ckpt.flush()?;

    let label = result.config.run.mode.to_string();
    let series = charts::accuracy_series(&label, &result.metrics);
    if !series.points.is_empty() {
        fs::write(dir.join("charts/accuracy.svg"), charts::accuracy_chart(&[series])?)?;
    }
    fs::write(dir.join("charts/breakdown.svg"), charts::breakdown_chart(&[(label, result.breakdown.clone())])?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_round_trip() {
        let rows = vec![
            MetricRow { iteration: 1, wall_clock_ms: 0.5, train_loss: 0.69, eval_accuracy: None },
            MetricRow { iteration: 2, wall_clock_ms: 1.25, train_loss: 0.5, eval_accuracy: Some(0.75) },
        ];
        let text = metrics_csv(&rows);
        assert!(text.starts_with("iteration,wall_clock_ms,train_loss,eval_accuracy\n1,0.500,0.690000,\n"));
        assert_eq!(parse_metrics_csv(&text).unwrap(), rows);
        assert!(parse_metrics_csv("a,b\n").is_err());
    }
}
