//! `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment. Command-line flags are
//! turned into the same pairs and override the file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pipesgd_core::collective::LinkModel;
use pipesgd_core::compression::CodecId;
use pipesgd_core::engine::{AllreduceKind, Mode, RunConfig, StepDecay};
use pipesgd_core::numerics::SyntheticSpec;

use crate::HarnessError;

/// Every key the parser accepts.
pub const KEYS: &[&str] = &[
    "mode",
    "workers",
    "codec",
    "k",
    "learning_rate",
    "lr_decay_every",
    "lr_decay_factor",
    "iterations",
    "batch_size",
    "warmup_epochs",
    "eval_interval",
    "seed",
    "prioritize_comm",
    "keep_cpu_awake",
    "allreduce",
    "chunks",
    "dataset",
    "synthetic_samples",
    "synthetic_dim",
    "synthetic_classes",
    "synthetic_separation",
    "eval_samples",
    "mnist_images",
    "mnist_labels",
    "mnist_test_images",
    "mnist_test_labels",
    "model",
    "hidden",
    "transport",
    "roster",
    "rank",
    "inject_alpha_ms",
    "inject_mbps",
    "out",
    "alpha",
    "beta",
    "gamma_red",
    "sync",
    "segments",
];

/// Ordered `key = value` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues(BTreeMap<String, String>);

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut out = KeyValues::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim().replace('-', "_");
            if out.0.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(HarnessError::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.0.insert(key.replace('-', "_"), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    /// `other` wins on conflicts.
    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), HarnessError> {
        match self.0.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(HarnessError::Config(format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, HarnessError>
    where
        T::Err: Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| HarnessError::Config(format!("{key} = {v:?}: {e}"))))
            .transpose()
    }

    pub fn required<T: FromStr>(&self, key: &str) -> Result<T, HarnessError>
    where
        T::Err: Display,
    {
        self.parsed(key)?.ok_or_else(|| HarnessError::Config(format!("missing key {key:?}")))
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    SyntheticConvex { spec: SyntheticSpec, eval_samples: usize },
    Mnist { images: PathBuf, labels: PathBuf, test_images: Option<PathBuf>, test_labels: Option<PathBuf> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelChoice {
    Logistic,
    Mlp { hidden: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TransportChoice {
    InProc,
    Tcp { roster: Vec<String>, rank: usize },
}

/// Values that replace calibrated cluster parameters in predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClusterOverrides {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma_red: Option<f64>,
    pub sync: Option<f64>,
    pub segments: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub workers: usize,
    pub dataset: DatasetSource,
    pub model: ModelChoice,
    pub transport: TransportChoice,
    pub inject_alpha_ms: f64,
    pub inject_mbps: Option<f64>,
    /// Spin an idle-priority thread during runs and calibration.
    pub keep_cpu_awake: bool,
    pub out_dir: PathBuf,
    pub overrides: ClusterOverrides,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run: RunConfig {
                mode: Mode::PipeSgd,
                k: 2,
                learning_rate: 0.05,
                iterations: 2000,
                batch_size: 32,
                eval_interval: 100,
                seed: 42,
                prioritize_comm: false,
                ..RunConfig::default()
            },
            workers: 4,
            dataset: DatasetSource::SyntheticConvex { spec: SyntheticSpec::default(), eval_samples: 2000 },
            model: ModelChoice::Logistic,
            transport: TransportChoice::InProc,
            inject_alpha_ms: 0.0,
            inject_mbps: None,
            keep_cpu_awake: true,
            out_dir: PathBuf::from("out"),
            overrides: ClusterOverrides::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    /// Builds a config from defaults plus `kv`, then validates it.
    pub fn from_pairs(kv: &KeyValues) -> Result<Self, HarnessError> {
        kv.check_keys(KEYS)?;
        let mut c = ExperimentConfig::default();
        let r = &mut c.run;
        if let Some(m) = kv.get("mode") {
            r.mode = m.parse().map_err(|_| config_err(format!("mode = {m:?}: expected ps_sync, d_sync or pipe_sgd")))?;
        }
        if let Some(v) = kv.get("codec") {
            r.codec = v.parse::<CodecId>().map_err(|e| config_err(format!("codec = {v:?}: {e}")))?;
        }
        r.k = kv.parsed("k")?.unwrap_or(r.k);
        r.learning_rate = kv.parsed("learning_rate")?.unwrap_or(r.learning_rate);
        r.iterations = kv.parsed("iterations")?.unwrap_or(r.iterations);
        r.batch_size = kv.parsed("batch_size")?.unwrap_or(r.batch_size);
        r.warmup_epochs = kv.parsed("warmup_epochs")?.unwrap_or(r.warmup_epochs);
        r.eval_interval = kv.parsed("eval_interval")?.unwrap_or(r.eval_interval);
        r.seed = kv.parsed("seed")?.unwrap_or(r.seed);
        r.prioritize_comm = kv.parsed("prioritize_comm")?.unwrap_or(r.prioritize_comm);
        r.lr_decay = match (kv.parsed::<u64>("lr_decay_every")?, kv.parsed::<f32>("lr_decay_factor")?) {
            (None, None) => None,
            (Some(every), Some(factor)) => Some(StepDecay { every, factor }),
            _ => return Err(config_err("lr_decay_every and lr_decay_factor go together")),
        };
        let chunks: Option<usize> = kv.parsed("chunks")?;
        r.allreduce = match kv.get("allreduce").unwrap_or("ring") {
            "ring" if chunks.is_none() => AllreduceKind::Ring,
            "ring" => return Err(config_err("chunks only applies to allreduce = pipelined")),
            "pipelined" => match chunks {
                Some(chunks) => AllreduceKind::Pipelined { chunks },
                None => AllreduceKind::pipelined(),
            },
            other => return Err(config_err(format!("allreduce = {other:?}: expected ring or pipelined"))),
        };
        c.workers = kv.parsed("workers")?.unwrap_or(c.workers);

        let synthetic_keys = ["synthetic_samples", "synthetic_dim", "synthetic_classes", "synthetic_separation", "eval_samples"];
        let mnist_keys = ["mnist_images", "mnist_labels", "mnist_test_images", "mnist_test_labels"];
        let has = |keys: &[&str]| keys.iter().any(|k| kv.get(k).is_some());
        c.dataset = match kv.get("dataset").unwrap_or("synthetic-convex") {
            "synthetic-convex" | "synthetic_convex" => {
                if has(&mnist_keys) {
                    return Err(config_err("mnist paths given for a synthetic dataset; pick one source"));
                }
                let d = SyntheticSpec::default();
                let spec = SyntheticSpec {
                    samples: kv.parsed("synthetic_samples")?.unwrap_or(d.samples),
                    dim: kv.parsed("synthetic_dim")?.unwrap_or(d.dim),
                    classes: kv.parsed("synthetic_classes")?.unwrap_or(d.classes),
                    separation: kv.parsed("synthetic_separation")?.unwrap_or(d.separation),
                    seed: c.run.seed,
                };
                DatasetSource::SyntheticConvex { spec, eval_samples: kv.parsed("eval_samples")?.unwrap_or(2000) }
            }
            "mnist" | "mnist-idx" => {
                if has(&synthetic_keys) {
                    return Err(config_err("synthetic settings given for an mnist dataset; pick one source"));
                }
                let test_images = kv.get("mnist_test_images").map(PathBuf::from);
                let test_labels = kv.get("mnist_test_labels").map(PathBuf::from);
                if test_images.is_some() != test_labels.is_some() {
                    return Err(config_err("mnist_test_images and mnist_test_labels go together"));
                }
                DatasetSource::Mnist {
                    images: kv.required::<String>("mnist_images")?.into(),
                    labels: kv.required::<String>("mnist_labels")?.into(),
                    test_images,
                    test_labels,
                }
            }
            other => return Err(config_err(format!("dataset = {other:?}: expected synthetic-convex or mnist"))),
        };

        c.model = match kv.get("model").unwrap_or("logistic") {
            "logistic" => {
                if kv.get("hidden").is_some() {
                    return Err(config_err("hidden layers given for a logistic model"));
                }
                ModelChoice::Logistic
            }
            "mlp" => {
                let hidden = kv.get("hidden").unwrap_or("128");
                let hidden = hidden
                    .split(',')
                    .map(|h| h.trim().parse::<usize>().map_err(|e| config_err(format!("hidden = {hidden:?}: {e}"))))
                    .collect::<Result<Vec<_>, _>>()?;
                ModelChoice::Mlp { hidden }
            }
            other => return Err(config_err(format!("model = {other:?}: expected logistic or mlp"))),
        };

        c.transport = match kv.get("transport").unwrap_or("inproc") {
            "inproc" => {
                if kv.get("roster").is_some() || kv.get("rank").is_some() {
                    return Err(config_err("roster/rank only apply to transport = tcp"));
                }
                TransportChoice::InProc
            }
            "tcp" => {
                let path: String = kv.required("roster")?;
                let roster = load_roster(Path::new(&path))?;
                TransportChoice::Tcp { roster, rank: kv.required("rank")? }
            }
            other => return Err(config_err(format!("transport = {other:?}: expected inproc or tcp"))),
        };
        c.inject_alpha_ms = kv.parsed("inject_alpha_ms")?.unwrap_or(0.0);
        c.inject_mbps = kv.parsed("inject_mbps")?;
        c.keep_cpu_awake = kv.parsed("keep_cpu_awake")?.unwrap_or(c.keep_cpu_awake);
        if let Some(out) = kv.get("out") {
            c.out_dir = PathBuf::from(out);
        }
        c.overrides = ClusterOverrides {
            alpha: kv.parsed("alpha")?,
            beta: kv.parsed("beta")?,
            gamma_red: kv.parsed("gamma_red")?,
            sync: kv.parsed("sync")?,
            segments: kv.parsed("segments")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.workers == 0 {
            return Err(config_err("workers must be at least 1"));
        }
        if let TransportChoice::Tcp { roster, rank } = &self.transport {
            if roster.len() != self.workers {
                return Err(config_err(format!("roster has {} entries for {} workers", roster.len(), self.workers)));
            }
            if *rank >= self.workers {
                return Err(config_err(format!("rank {rank} out of range for {} workers", self.workers)));
            }
            if self.run.mode == Mode::PsSync {
                return Err(config_err("ps_sync runs on the in-process transport only"));
            }
        }
        if !(self.inject_alpha_ms >= 0.0 && self.inject_alpha_ms.is_finite()) {
            return Err(config_err("inject_alpha_ms must be a non-negative number"));
        }
        if let Some(m) = self.inject_mbps {
            if !(m > 0.0 && m.is_finite()) {
                return Err(config_err("inject_mbps must be positive"));
            }
        }
        if let ModelChoice::Mlp { hidden } = &self.model {
            if hidden.is_empty() || hidden.contains(&0) {
                return Err(config_err("hidden layer sizes must be positive"));
            }
        }
        if let DatasetSource::SyntheticConvex { eval_samples: 0, .. } = self.dataset {
            return Err(config_err("eval_samples must be positive"));
        }
        if self.overrides.segments == Some(0) {
            return Err(config_err("segments must be at least 1"));
        }
        Ok(())
    }

    pub fn link(&self) -> LinkModel {
        LinkModel::from_alpha_ms_mbps(self.inject_alpha_ms, self.inject_mbps)
    }

    /// Pairs that reproduce this config.
    pub fn to_pairs(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let r = &self.run;
        kv.set("mode", r.mode);
        kv.set("workers", self.workers);
        kv.set("codec", r.codec);
        kv.set("k", r.k);
        kv.set("learning_rate", r.learning_rate);
        if let Some(d) = r.lr_decay {
            kv.set("lr_decay_every", d.every);
            kv.set("lr_decay_factor", d.factor);
        }
        kv.set("iterations", r.iterations);
        kv.set("batch_size", r.batch_size);
        kv.set("warmup_epochs", r.warmup_epochs);
        kv.set("eval_interval", r.eval_interval);
        kv.set("seed", r.seed);
        kv.set("prioritize_comm", r.prioritize_comm);
        match r.allreduce {
            AllreduceKind::Ring => kv.set("allreduce", "ring"),
            AllreduceKind::Pipelined { chunks } => {
                kv.set("allreduce", "pipelined");
                kv.set("chunks", chunks);
            }
        }
        match &self.dataset {
            DatasetSource::SyntheticConvex { spec, eval_samples } => {
                kv.set("dataset", "synthetic-convex");
                kv.set("synthetic_samples", spec.samples);
                kv.set("synthetic_dim", spec.dim);
                kv.set("synthetic_classes", spec.classes);
                kv.set("synthetic_separation", spec.separation);
                kv.set("eval_samples", eval_samples);
            }
            DatasetSource::Mnist { images, labels, test_images, test_labels } => {
                kv.set("dataset", "mnist");
                kv.set("mnist_images", images.display());
                kv.set("mnist_labels", labels.display());
                if let (Some(i), Some(l)) = (test_images, test_labels) {
                    kv.set("mnist_test_images", i.display());
                    kv.set("mnist_test_labels", l.display());
                }
            }
        }
        match &self.model {
            ModelChoice::Logistic => kv.set("model", "logistic"),
            ModelChoice::Mlp { hidden } => {
                kv.set("model", "mlp");
                kv.set("hidden", hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
            }
        }
        match &self.transport {
            TransportChoice::InProc => kv.set("transport", "inproc"),
            TransportChoice::Tcp { rank, .. } => {
                kv.set("transport", "tcp");
                kv.set("rank", rank);
            }
        }
        kv.set("inject_alpha_ms", self.inject_alpha_ms);
        if let Some(m) = self.inject_mbps {
            kv.set("inject_mbps", m);
        }
        kv.set("keep_cpu_awake", self.keep_cpu_awake);
        kv.set("out", self.out_dir.display());
        kv
    }
}

/// One `host:port` per line; blank lines and `#` comments are skipped.
pub fn load_roster(path: &Path) -> Result<Vec<String>, HarnessError> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read roster {}: {e}", path.display())))?;
    let roster: Vec<String> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if roster.is_empty() {
        return Err(config_err(format!("roster {} is empty", path.display())));
    }
    Ok(roster)
}
