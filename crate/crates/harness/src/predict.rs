//! Closed-form runtime predictions from stage and cluster parameters.

use std::fmt::Write as _;

use pipesgd_core::timing::{
    pipe_ideal_total_time, pipe_limited_total_time, pipe_segmented_total_time, pipe_sequential_total_time,
    recommend_config, ring_comm_time, scaling_efficiency, sync_total_time, Bound, CommMode, Recommendation,
};
use pipesgd_core::{ClusterParams, StageTimes};

use crate::config::KeyValues;
use crate::HarnessError;

/// Keys accepted in a prediction input file. `codec` is carried along by
/// calibration output and ignored here.
pub const PREDICT_KEYS: &[&str] = &[
    "iterations",
    "k",
    "update",
    "forward",
    "backward",
    "first_segment_backward",
    "comm",
    "workers",
    "alpha",
    "beta",
    "gamma_red",
    "sync",
    "model_bytes",
    "segments",
    "codec",
];

#[derive(Clone, Debug, PartialEq)]
pub struct PredictInput {
    pub iterations: u64,
    pub k: u64,
    pub stages: StageTimes,
    pub cluster: ClusterParams,
}

impl PredictInput {
    /// Missing `comm` is derived from the ring cost model; missing
    /// `first_segment_backward` defaults to `backward`.
    pub fn from_pairs(kv: &KeyValues) -> Result<Self, HarnessError> {
        kv.check_keys(PREDICT_KEYS)?;
        let cluster = ClusterParams {
            workers: kv.required("workers")?,
            alpha: kv.parsed("alpha")?.unwrap_or(0.0),
            beta: kv.parsed("beta")?.unwrap_or(0.0),
            gamma_red: kv.parsed("gamma_red")?.unwrap_or(0.0),
            sync: kv.parsed("sync")?.unwrap_or(0.0),
            model_bytes: kv.parsed("model_bytes")?.unwrap_or(0.0),
            segments: kv.parsed("segments")?.unwrap_or(1),
        };
        cluster.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let backward: f64 = kv.required("backward")?;
        let stages = StageTimes {
            update: kv.required("update")?,
            forward: kv.required("forward")?,
            backward,
            first_segment_backward: kv.parsed("first_segment_backward")?.unwrap_or(backward),
            comm: match kv.parsed("comm")? {
                Some(c) => c,
                None => ring_comm_time(&cluster),
            },
        };
        stages.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let input = PredictInput { iterations: kv.required("iterations")?, k: kv.parsed("k")?.unwrap_or(2), stages, cluster };
        if input.k == 0 {
            return Err(HarnessError::Config("k must be at least 1".into()));
        }
        Ok(input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub sync_total: f64,
    pub pipe_ideal_total: f64,
    pub pipe_limited_total: f64,
    pub ring_comm: f64,
    pub pipe_sequential_total: f64,
    pub pipe_segmented_total: f64,
    /// `None` when there is no local compute to scale.
    pub scaling_efficiency: Option<f64>,
    pub recommendation: Recommendation,
}

pub fn predict(input: &PredictInput) -> Prediction {
    let (t, s, c) = (input.iterations, &input.stages, &input.cluster);
    Prediction {
        sync_total: sync_total_time(t, s),
        pipe_ideal_total: pipe_ideal_total_time(t, input.k, s),
        pipe_limited_total: pipe_limited_total_time(t, s),
        ring_comm: ring_comm_time(c),
        pipe_sequential_total: pipe_sequential_total_time(t, s, c),
        pipe_segmented_total: pipe_segmented_total_time(t, s, c),
        scaling_efficiency: scaling_efficiency(s).ok(),
        recommendation: recommend_config(s, c),
    }
}

fn describe(r: &Recommendation) -> String {
    let mode = match r.comm_mode {
        CommMode::Sequential => "sequential",
        CommMode::Segmented => "segmented",
    };
    let bound = match r.bound {
        Bound::Compute => "compute",
        Bound::Communication => "communication",
    };
    format!("K={} {mode} communication, {bound}-bound", r.k)
}

fn se_text(p: &Prediction) -> String {
    p.scaling_efficiency.map(|v| format!("{v:.6}")).unwrap_or_else(|| "undefined".into())
}

pub fn report_text(p: &Prediction) -> String {
    let mut out = String::new();
    let rows = [
        ("sync_total_s", p.sync_total),
        ("pipe_ideal_total_s", p.pipe_ideal_total),
        ("pipe_limited_total_s", p.pipe_limited_total),
        ("ring_comm_s", p.ring_comm),
        ("pipe_sequential_total_s", p.pipe_sequential_total),
        ("pipe_segmented_total_s", p.pipe_segmented_total),
    ];
    for (name, v) in rows {
        let _ = writeln!(out, "{name:<24} {v:.6}");
    }
    let _ = writeln!(out, "{:<24} {}", "scaling_efficiency", se_text(p));
    let _ = writeln!(out, "{:<24} {}", "recommendation", describe(&p.recommendation));
    out
}

pub const PREDICT_CSV_HEADER: &str = "sync_total_s,pipe_ideal_total_s,pipe_limited_total_s,ring_comm_s,pipe_sequential_total_s,pipe_segmented_total_s,scaling_efficiency,recommended_k,comm_mode,bound";

pub fn report_csv(p: &Prediction) -> String {
    let r = &p.recommendation;
    format!(
        "{PREDICT_CSV_HEADER}\n{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{},{},{},{}\n",
        p.sync_total,
        p.pipe_ideal_total,
        p.pipe_limited_total,
        p.ring_comm,
        p.pipe_sequential_total,
        p.pipe_segmented_total,
        se_text(p),
        r.k,
        if r.comm_mode == CommMode::Segmented { "segmented" } else { "sequential" },
        if r.bound == Bound::Compute { "compute" } else { "communication" },
    )
}
