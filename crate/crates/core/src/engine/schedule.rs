use super::config::{iterations_per_epoch, Mode, RunConfig};

/// Which aggregated gradient the update at some iteration consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dependency {
    pub tag: i64,
    /// The slot holds the zero initialization rather than a real AllReduce.
    pub zero: bool,
}

/// Dependency pattern of a run, including the warm-up switch.
///
/// Before the switch iteration `t0` every update consumes `t - 1`. The
/// update at `t0` also consumes `t0 - 1`, which drains the synchronous
/// phase; from then on the update at `t` consumes `t - K`, and tags below
/// `t0` are replaced by zero slots so no gradient is applied twice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    k: u64,
    /// First pipelined iteration; `None` when the run never pipelines.
    switch: Option<u64>,
}

impl Schedule {
    pub fn new(config: &RunConfig, num_samples: usize, workers: usize) -> Self {
        if config.mode != Mode::PipeSgd {
            return Schedule { k: 1, switch: None };
        }
        let switch = if config.warmup_epochs == 0 {
            0
        } else {
            config.warmup_epochs * iterations_per_epoch(num_samples, workers, config.batch_size) + 1
        };
        Schedule { k: config.k as u64, switch: Some(switch) }
    }

    pub fn pipelined(k: u64) -> Self {
        Schedule { k, switch: Some(0) }
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn switch_iteration(&self) -> Option<u64> {
        self.switch
    }

    pub fn is_pipelined_at(&self, t: u64) -> bool {
        matches!(self.switch, Some(s) if t > s)
    }

    pub fn dependency(&self, t: u64) -> Dependency {
        let t = t as i64;
        match self.switch {
            Some(s) if t > s as i64 => {
                let tag = t - self.k as i64;
                Dependency { tag, zero: tag < (s as i64).max(1) }
            }
            _ => Dependency { tag: t - 1, zero: t - 1 < 1 },
        }
    }

    /// Zero slots the buffer holds before iteration 1.
    pub fn initial_zero_tags(&self) -> Vec<i64> {
        let first = if self.is_pipelined_at(1) { 1 - self.k as i64 } else { 0 };
        (first..=0).collect()
    }

    /// Zero slots to add once the update of iteration `t` is done.
    pub fn zero_tags_after(&self, t: u64) -> Vec<i64> {
        match self.switch {
            Some(s) if s >= 1 && t == s => ((s as i64 + 1 - self.k as i64).max(1)..s as i64).collect(),
            _ => Vec::new(),
        }
    }

    /// Dependency in effect at the end of a `t`-iteration run; the tail
    /// tags are applied as iterations `T + 1 ..` spaced this far apart.
    pub fn final_k(&self, iterations: u64) -> u64 {
        if self.is_pipelined_at(iterations + 1) {
            self.k
        } else {
            1
        }
    }
}
