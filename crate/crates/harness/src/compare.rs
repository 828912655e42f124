//! Measured iteration times against the timing model.

use std::fmt::Write as _;
use std::path::Path;

use pipesgd_core::engine::Mode;
use pipesgd_core::timing::ring_comm_time;
use pipesgd_core::{ClusterParams, StageTimes};

use crate::config::KeyValues;
use crate::predict::PredictInput;
use crate::HarnessError;

/// Disagreement above this is flagged in the report.
pub const FLAG_THRESHOLD: f64 = 0.25;

/// Acceptance threshold per mode, if the mode has one.
pub fn threshold(mode: Mode) -> Option<f64> {
    match mode {
        Mode::DSync => Some(0.10),
        Mode::PipeSgd => Some(0.15),
        Mode::PsSync => None,
    }
}

/// The part of a run's summary the comparison needs.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasuredRun {
    pub mode: Mode,
    pub workers: usize,
    pub codec: String,
    pub k: u64,
    pub iterations: u64,
    pub warmup_iterations: u64,
    pub iteration_s: f64,
}

impl MeasuredRun {
    pub fn from_summary(kv: &KeyValues) -> Result<Self, HarnessError> {
        Ok(MeasuredRun {
            mode: kv.required("mode")?,
            workers: kv.required("workers")?,
            codec: kv.required("codec")?,
            k: kv.required("k")?,
            iterations: kv.required("iterations")?,
            warmup_iterations: kv.parsed("warmup_iterations")?.unwrap_or(0),
            iteration_s: kv.required("iteration_s")?,
        })
    }

    pub fn load(run_dir: &Path) -> Result<Self, HarnessError> {
        Self::from_summary(&KeyValues::load(&run_dir.join("summary.txt"))?)
    }
}

/// Predicted seconds per iteration for `run`.
///
/// Pipe-SGD runs its warm-up iterations synchronously, then pays one
/// `max(local, comm)` per iteration plus `K - 1` more to drain the
/// pipeline. PS-Sync uses a star model in which the server link carries
/// every worker's gradient in each direction.
pub fn predicted_iteration(run: &MeasuredRun, stages: &StageTimes, cluster: &ClusterParams) -> f64 {
    let local = stages.local();
    let comm = stages.comm;
    match run.mode {
        Mode::DSync => local + comm,
        Mode::PipeSgd => {
            let t = run.iterations as f64;
            let t0 = run.warmup_iterations.min(run.iterations) as f64;
            let fill = run.k.saturating_sub(1) as f64;
            (t0 * (local + comm) + (t - t0 + fill) * local.max(comm)) / t
        }
        Mode::PsSync => {
            let p = cluster.workers as f64;
            local + 2.0 * cluster.alpha + 2.0 * p * cluster.model_bytes * cluster.beta
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub mode: Mode,
    pub measured_s: f64,
    pub predicted_s: f64,
    pub relative_error: f64,
    pub communication_bound: bool,
    pub flagged: bool,
    pub within_threshold: bool,
}

pub fn compare(runs: &[MeasuredRun], calibration: &KeyValues) -> Result<Vec<ComparisonRow>, HarnessError> {
    if runs.is_empty() {
        return Err(HarnessError::Config("nothing to compare".into()));
    }
    let mut kv = calibration.clone();
    if kv.get("iterations").is_none() {
        kv.set("iterations", runs[0].iterations);
    }
    let input = PredictInput::from_pairs(&kv)?;
    let codec = calibration.get("codec");
    let mut rows = Vec::with_capacity(runs.len());
    for run in runs {
        if run.workers != input.cluster.workers {
            return Err(HarnessError::Config(format!(
                "{} run used {} workers, calibration has {}",
                run.mode, run.workers, input.cluster.workers
            )));
        }
        // PS-Sync always ships raw gradients, so its codec never matters.
        if run.mode != Mode::PsSync && codec.is_some_and(|c| c != run.codec) {
            return Err(HarnessError::Config(format!("{} run used codec {}, calibration {}", run.mode, run.codec, codec.unwrap())));
        }
        let predicted = predicted_iteration(run, &input.stages, &input.cluster);
        let err = (run.iteration_s - predicted).abs() / predicted.max(f64::MIN_POSITIVE);
        rows.push(ComparisonRow {
            mode: run.mode,
            measured_s: run.iteration_s,
            predicted_s: predicted,
            relative_error: err,
            communication_bound: ring_comm_time(&input.cluster).max(input.stages.comm) > input.stages.local(),
            flagged: err > FLAG_THRESHOLD,
            within_threshold: threshold(run.mode).is_none_or(|th| err < th),
        });
    }
    Ok(rows)
}

pub fn report_text(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{:<9} {:>12} {:>12} {:>9} {:<14} {}\n", "mode", "measured_s", "predicted_s", "rel_err", "bound", "status");
    for r in rows {
        let status = match (r.within_threshold, r.flagged, threshold(r.mode)) {
            (false, _, Some(th)) => format!("FAIL (> {:.0}%)", th * 100.0),
            (true, true, _) => "DISAGREE (> 25%)".to_string(),
            (_, _, None) => "info".to_string(),
            _ => "ok".to_string(),
        };
        let bound = if r.communication_bound { "communication" } else { "compute" };
        let _ = writeln!(
            out,
            "{:<9} {:>12.6} {:>12.6} {:>8.1}% {:<14} {}",
            r.mode.to_string(),
            r.measured_s,
            r.predicted_s,
            r.relative_error * 100.0,
            bound,
            status
        );
    }
    out
}

/// `Threshold` error naming every failing mode, if any.
pub fn check(rows: &[ComparisonRow]) -> Result<(), HarnessError> {
    let failing: Vec<String> = rows
        .iter()
        .filter(|r| !r.within_threshold)
        .map(|r| format!("{} off by {:.1}%", r.mode, r.relative_error * 100.0))
        .collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Threshold(failing.join(", ")))
    }
}
