use std::fmt;
use std::str::FromStr;

use super::EngineError;
use crate::collective::DEFAULT_PIPELINE_CHUNKS;
use crate::compression::CodecId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    PsSync,
    DSync,
    PipeSgd,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::PsSync, Mode::DSync, Mode::PipeSgd];

    pub fn name(self) -> &'static str {
        match self {
            Mode::PsSync => "ps_sync",
            Mode::DSync => "d_sync",
            Mode::PipeSgd => "pipe_sgd",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| EngineError::Config(format!("unknown mode {s:?}")))
    }
}

/// Multiply the learning rate by `factor` every `every` iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub every: u64,
    pub factor: f32,
}

/// Which AllReduce the communication path uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AllreduceKind {
    Ring,
    Pipelined { chunks: usize },
}

impl Default for AllreduceKind {
    fn default() -> Self {
        AllreduceKind::Ring
    }
}

impl AllreduceKind {
    pub fn pipelined() -> Self {
        AllreduceKind::Pipelined { chunks: DEFAULT_PIPELINE_CHUNKS }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    /// Iteration dependency; only used by `pipe_sgd`.
    pub k: usize,
    pub learning_rate: f32,
    pub lr_decay: Option<StepDecay>,
    pub codec: CodecId,
    pub allreduce: AllreduceKind,
    pub iterations: u64,
    /// Per-worker batch size.
    pub batch_size: usize,
    /// Epochs of D-Sync before pipelining starts (`pipe_sgd` only).
    pub warmup_epochs: u64,
    /// Parameter snapshots for evaluation every this many iterations; 0 disables.
    pub eval_interval: u64,
    pub seed: u64,
    /// Run compute at idle scheduling priority (the whole Pipe-SGD compute
    /// thread; the compute stages of D-Sync) so communication wakes on time
    /// when workers share CPU cores. Linux only; ignored elsewhere.
    pub prioritize_comm: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::PipeSgd,
            k: 2,
            learning_rate: 0.05,
            lr_decay: None,
            codec: CodecId::None,
            allreduce: AllreduceKind::Ring,
            iterations: 2000,
            batch_size: 32,
            warmup_epochs: 0,
            eval_interval: 100,
            seed: 42,
            prioritize_comm: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, workers: usize, num_samples: usize) -> Result<(), EngineError> {
        let fail = |msg: String| Err(EngineError::Config(msg));
        if workers == 0 {
            return fail("need at least one worker".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.iterations == 0 {
            return fail("iterations must be at least 1".into());
        }
        if self.iterations > u64::from(u32::MAX) {
            return fail("iterations must fit the u32 frame tag".into());
        }
        if self.mode == Mode::PipeSgd && self.k < 2 {
            return fail(format!("pipe_sgd needs k >= 2, got {}", self.k));
        }
        let shard = num_samples / workers;
        if self.batch_size == 0 || self.batch_size > shard {
            return fail(format!("batch size {} must be within 1..={shard} (per-worker shard)", self.batch_size));
        }
        if let Some(d) = self.lr_decay {
            if d.every == 0 || !(d.factor > 0.0 && d.factor.is_finite()) {
                return fail("lr decay needs every >= 1 and a positive factor".into());
            }
        }
        if let AllreduceKind::Pipelined { chunks: 0 } = self.allreduce {
            return fail("pipelined allreduce needs at least one chunk".into());
        }
        Ok(())
    }

    /// Learning rate applied to the gradient computed at iteration `tag`.
    pub fn learning_rate_at(&self, tag: u64) -> f32 {
        match self.lr_decay {
            Some(d) if tag > 0 => self.learning_rate * d.factor.powi(((tag - 1) / d.every) as i32),
            _ => self.learning_rate,
        }
    }

    /// Iteration dependency in effect: `k` for `pipe_sgd`, 1 otherwise.
    pub fn effective_k(&self) -> usize {
        if self.mode == Mode::PipeSgd {
            self.k
        } else {
            1
        }
    }
}

/// Iterations that together touch every sample once: `ceil(n / (p * batch))`.
pub fn iterations_per_epoch(num_samples: usize, workers: usize, batch_size: usize) -> u64 {
    let global = (workers * batch_size).max(1);
    num_samples.div_ceil(global).max(1) as u64
}

/// D-Sync while `epoch < warmup_epochs`, the configured mode afterwards.
pub fn warmup_controller(config: &RunConfig, epoch: u64) -> Mode {
    if config.mode == Mode::PipeSgd && epoch < config.warmup_epochs {
        Mode::DSync
    } else {
        config.mode
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_switch() {
        let mut c = RunConfig { warmup_epochs: 0, ..Default::default() };
        assert_eq!(warmup_controller(&c, 0), Mode::PipeSgd);
        c.warmup_epochs = 5;
        assert_eq!(warmup_controller(&c, 4), Mode::DSync);
        assert_eq!(warmup_controller(&c, 5), Mode::PipeSgd);
        c.mode = Mode::PsSync;
        assert_eq!(warmup_controller(&c, 0), Mode::PsSync);
    }

    #[test]
    fn epochs() {
        assert_eq!(iterations_per_epoch(10_000, 4, 32), 79);
        assert_eq!(iterations_per_epoch(100, 4, 25), 1);
        assert_eq!(iterations_per_epoch(1, 1, 1), 1);
    }

    #[test]
    fn decay_by_gradient_tag() {
        let c = RunConfig { learning_rate: 1.0, lr_decay: Some(StepDecay { every: 10, factor: 0.5 }), ..Default::default() };
        assert_eq!(c.learning_rate_at(1), 1.0);
        assert_eq!(c.learning_rate_at(10), 1.0);
        assert_eq!(c.learning_rate_at(11), 0.5);
        assert_eq!(c.learning_rate_at(21), 0.25);
    }

    #[test]
    fn validation() {
        let c = RunConfig::default();
        assert!(c.validate(4, 10_000).is_ok());
        assert!(RunConfig { k: 1, ..c.clone() }.validate(4, 10_000).is_err());
        assert!(RunConfig { k: 1, mode: Mode::DSync, ..c.clone() }.validate(4, 10_000).is_ok());
        assert!(RunConfig { learning_rate: 0.0, ..c.clone() }.validate(4, 10_000).is_err());
        assert!(RunConfig { batch_size: 3000, ..c.clone() }.validate(4, 10_000).is_err());
        assert!(RunConfig { iterations: 0, ..c.clone() }.validate(4, 10_000).is_err());
        assert!(c.validate(0, 10_000).is_err());
        assert_eq!("pipe_sgd".parse::<Mode>().unwrap(), Mode::PipeSgd);
        assert!("async".parse::<Mode>().is_err());
    }
}
