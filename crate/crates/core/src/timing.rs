//! Closed-form runtime predictions.
//!
//! Synchronous SGD pays for every stage each iteration; pipelined SGD with
//! iteration dependency `K` overlaps neighbouring iterations and, once
//! resources are limited, runs at the pace of the slower of compute and
//! communication. Communication cost follows the latency/bandwidth model of
//! ring AllReduce. All functions are pure.

use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimingError {
    #[error("{0} must be finite and non-negative")]
    Negative(&'static str),
    #[error("backward time of the first segment exceeds the full backward pass")]
    SegmentLongerThanBackward,
    #[error("{0} must be at least 1")]
    Count(&'static str),
    #[error("scaling efficiency is undefined without compute time")]
    ZeroCompute,
}

/// Per-iteration stage durations in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageTimes<F> {
    pub update: F,
    pub forward: F,
    pub backward: F,
    /// Backward time until the first gradient segment is available.
    pub first_segment_backward: F,
    pub comm: F,
}

impl<F: Scalar> StageTimes<F> {
    /// Single-segment stage times (`first_segment_backward == backward`).
    pub fn new(update: F, forward: F, backward: F, comm: F) -> Self {
        StageTimes { update, forward, backward, first_segment_backward: backward, comm }
    }

    pub fn compute(&self) -> F {
        self.forward + self.backward
    }

    /// `l_up + l_comp`, the local work of one iteration.
    pub fn local(&self) -> F {
        self.update + self.compute()
    }

    pub fn validate(&self) -> Result<(), TimingError> {
        for (name, v) in [
            ("update", self.update),
            ("forward", self.forward),
            ("backward", self.backward),
            ("first_segment_backward", self.first_segment_backward),
            ("comm", self.comm),
        ] {
            non_negative(name, v)?;
        }
        if self.first_segment_backward > self.backward {
            return Err(TimingError::SegmentLongerThanBackward);
        }
        Ok(())
    }
}

/// Cluster parameters of the ring AllReduce cost model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterParams<F> {
    pub workers: usize,
    /// Network latency per message, seconds.
    pub alpha: F,
    /// Transfer time per byte, seconds.
    pub beta: F,
    /// Sum-reduction time per byte, seconds.
    pub gamma_red: F,
    /// Global synchronization time, seconds.
    pub sync: F,
    /// Bytes of gradient exchanged per worker.
    pub model_bytes: F,
    /// Gradient segments communicated separately.
    pub segments: usize,
}

impl<F: Scalar> ClusterParams<F> {
    pub fn validate(&self) -> Result<(), TimingError> {
        if self.workers == 0 {
            return Err(TimingError::Count("workers"));
        }
        if self.segments == 0 {
            return Err(TimingError::Count("segments"));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma_red", self.gamma_red),
            ("sync", self.sync),
            ("model_bytes", self.model_bytes),
        ] {
            non_negative(name, v)?;
        }
        Ok(())
    }
}

fn non_negative<F: Scalar>(name: &'static str, v: F) -> Result<(), TimingError> {
    if v.is_finite() && v >= F::zero() {
        Ok(())
    } else {
        Err(TimingError::Negative(name))
    }
}

fn count<F: Scalar>(n: u64) -> F {
    F::from_u64(n).expect("iteration count representable")
}

/// `T * (l_up + l_comp + l_comm)`.
pub fn sync_total_time<F: Scalar>(iterations: u64, stages: &StageTimes<F>) -> F {
    count::<F>(iterations) * (stages.local() + stages.comm)
}

/// `(T / K) * (l_up + l_comp + l_comm)` with unlimited resources; `T / K` is
/// real division.
pub fn pipe_ideal_total_time<F: Scalar>(iterations: u64, k: u64, stages: &StageTimes<F>) -> F {
    count::<F>(iterations) / count::<F>(k.max(1)) * (stages.local() + stages.comm)
}

/// `T * max(l_up + l_comp, l_comm)`: resource-limited pipelining, the same
/// for every `K >= 2`.
pub fn pipe_limited_total_time<F: Scalar>(iterations: u64, stages: &StageTimes<F>) -> F {
    count::<F>(iterations) * stages.local().max(stages.comm)
}

/// `2(p-1)a + 2((p-1)/p) n b + ((p-1)/p) n g + S`.
pub fn ring_comm_time<F: Scalar>(params: &ClusterParams<F>) -> F {
    comm_time(params, 1)
}

/// Communication term with `L` separately exchanged segments:
/// `2(p-1)L a + 2((p-1)/p) n b + ((p-1)/p) n g + L S`.
pub fn segmented_comm_time<F: Scalar>(params: &ClusterParams<F>) -> F {
    comm_time(params, params.segments.max(1))
}

fn comm_time<F: Scalar>(params: &ClusterParams<F>, segments: usize) -> F {
    let p = F::from_usize_lossy(params.workers.max(1));
    let l = F::from_usize_lossy(segments);
    let two = F::lit(2.0);
    let frac = (p - F::one()) / p;
    two * (p - F::one()) * l * params.alpha
        + two * frac * params.model_bytes * params.beta
        + frac * params.model_bytes * params.gamma_red
        + l * params.sync
}

/// `T * max(l_up + l_for + l_back, ring_comm_time)`.
pub fn pipe_sequential_total_time<F: Scalar>(iterations: u64, stages: &StageTimes<F>, params: &ClusterParams<F>) -> F {
    count::<F>(iterations) * sequential_iteration(stages, params)
}

/// `T * max(l_up + l_for + l_b, segmented_comm_time)`.
pub fn pipe_segmented_total_time<F: Scalar>(iterations: u64, stages: &StageTimes<F>, params: &ClusterParams<F>) -> F {
    count::<F>(iterations) * segmented_iteration(stages, params)
}

fn sequential_iteration<F: Scalar>(stages: &StageTimes<F>, params: &ClusterParams<F>) -> F {
    stages.local().max(ring_comm_time(params))
}

fn segmented_iteration<F: Scalar>(stages: &StageTimes<F>, params: &ClusterParams<F>) -> F {
    segment_local(stages).max(segmented_comm_time(params))
}

/// `l_up + l_for + l_b`, grouped like [`StageTimes::local`] so a single
/// segment gives a bit-identical value.
fn segment_local<F: Scalar>(stages: &StageTimes<F>) -> F {
    stages.update + (stages.forward + stages.first_segment_backward)
}

/// `(l_up + l_comp) / max(l_up + l_comp, l_comm)`.
pub fn scaling_efficiency<F: Scalar>(stages: &StageTimes<F>) -> Result<F, TimingError> {
    let local = stages.local();
    if !(local > F::zero()) {
        return Err(TimingError::ZeroCompute);
    }
    Ok(local / local.max(stages.comm))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommMode {
    Sequential,
    Segmented,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bound {
    Compute,
    Communication,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Recommendation {
    pub k: u64,
    pub comm_mode: CommMode,
    pub bound: Bound,
}

/// Always `K = 2`. Segmented communication is chosen only when its
/// per-iteration time is strictly below the sequential one; the bound label
/// compares local work against communication in the chosen mode (ties count
/// as compute-bound).
pub fn recommend_config<F: Scalar>(stages: &StageTimes<F>, params: &ClusterParams<F>) -> Recommendation {
    let sequential = sequential_iteration(stages, params);
    let segmented = segmented_iteration(stages, params);
    let (comm_mode, local, comm) = if segmented < sequential {
        (
            CommMode::Segmented,
            segment_local(stages),
            segmented_comm_time(params),
        )
    } else {
        (CommMode::Sequential, stages.local(), ring_comm_time(params))
    };
    let bound = if comm <= local { Bound::Compute } else { Bound::Communication };
    Recommendation { k: 2, comm_mode, bound }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stages(update: f64, compute: f64, comm: f64) -> StageTimes<f64> {
        StageTimes::new(update, compute, 0.0, comm)
    }

    fn cluster(workers: usize, alpha: f64, beta: f64, gamma: f64, sync: f64, n: f64, l: usize) -> ClusterParams<f64> {
        ClusterParams { workers, alpha, beta, gamma_red: gamma, sync, model_bytes: n, segments: l }
    }

    #[test]
    fn sync_total() {
        assert_eq!(sync_total_time(1, &stages(1.0, 2.0, 3.0)), 6.0);
        assert_eq!(sync_total_time(10, &stages(1.0, 2.0, 0.0)), 30.0);
        assert!((sync_total_time(100, &stages(0.1, 0.9, 0.5)) - 150.0).abs() < 1e-9);
    }

    #[test]
    fn pipe_ideal() {
        let s = stages(0.1, 0.9, 0.5);
        assert_eq!(pipe_ideal_total_time(100, 1, &s), sync_total_time(100, &s));
        assert!((pipe_ideal_total_time(100, 2, &s) - sync_total_time(100, &s) / 2.0).abs() < 1e-12);
        assert!((pipe_ideal_total_time(100, 4, &s) - 37.5).abs() < 1e-9);
    }

    #[test]
    fn pipe_limited() {
        assert_eq!(pipe_limited_total_time(3, &stages(1.0, 4.0, 3.0)), 15.0);
        assert_eq!(pipe_limited_total_time(3, &stages(1.0, 1.0, 7.0)), 21.0);
        assert_eq!(pipe_limited_total_time(3, &stages(1.0, 3.0, 4.0)), 12.0);
    }

    #[test]
    fn ring_comm() {
        assert_eq!(ring_comm_time(&cluster(1, 5.0, 5.0, 5.0, 0.25, 100.0, 1)), 0.25);
        assert_eq!(ring_comm_time(&cluster(4, 1.0, 1.0, 1.0, 0.0, 8.0, 1)), 24.0);
        let base = ring_comm_time(&cluster(4, 1.0, 1.0, 1.0, 0.0, 8.0, 1));
        let doubled = ring_comm_time(&cluster(4, 1.0, 2.0, 1.0, 0.0, 8.0, 1));
        assert_eq!(doubled - base, 12.0);
    }

    #[test]
    fn segmented_comm() {
        assert_eq!(segmented_comm_time(&cluster(4, 1.0, 0.0, 0.0, 2.0, 0.0, 8)), 64.0);
        let s = StageTimes::new(0.1, 0.3, 0.6, 0.0);
        let c = cluster(4, 1e-3, 1e-6, 1e-7, 1e-3, 1e5, 1);
        assert_eq!(pipe_segmented_total_time(10, &s, &c), pipe_sequential_total_time(10, &s, &c));
    }

    #[test]
    fn pipe_sequential_cases() {
        let c = cluster(4, 1.0, 1.0, 1.0, 0.0, 8.0, 1); // comm = 24
        assert_eq!(pipe_sequential_total_time(2, &StageTimes::new(10.0, 10.0, 10.0, 0.0), &c), 60.0);
        assert_eq!(pipe_sequential_total_time(2, &StageTimes::new(1.0, 1.0, 1.0, 0.0), &c), 48.0);
        assert_eq!(pipe_sequential_total_time(2, &StageTimes::new(4.0, 10.0, 10.0, 0.0), &c), 48.0);
    }

    #[test]
    fn efficiency() {
        assert_eq!(scaling_efficiency(&stages(1.0, 2.0, 1.0)).unwrap(), 1.0);
        assert_eq!(scaling_efficiency(&stages(1.0, 1.0, 4.0)).unwrap(), 0.5);
        assert_eq!(scaling_efficiency(&stages(1.0, 1.0, 0.0)).unwrap(), 1.0);
        assert_eq!(scaling_efficiency(&stages(0.0, 0.0, 1.0)), Err(TimingError::ZeroCompute));
    }

    #[test]
    fn recommendations() {
        let comm_bound = cluster(8, 1e-3, 1e-8, 1e-9, 1e-3, 1e8, 4);
        let r = recommend_config(&StageTimes::new(0.01, 0.05, 0.1, 0.0), &comm_bound);
        assert_eq!(r, Recommendation { k: 2, comm_mode: CommMode::Sequential, bound: Bound::Communication });

        let mut s = StageTimes::new(0.01, 0.2, 0.6, 0.0);
        s.first_segment_backward = 0.05;
        let light = cluster(4, 1e-5, 1e-10, 1e-11, 1e-5, 1e6, 4);
        // sequential: max(0.81, ~2e-4); segmented: max(0.26, ~5e-4)
        let r = recommend_config(&s, &light);
        assert_eq!(r, Recommendation { k: 2, comm_mode: CommMode::Segmented, bound: Bound::Compute });

        let single = cluster(1, 1e-3, 1e-8, 1e-9, 0.0, 1e6, 1);
        let r = recommend_config(&StageTimes::new(0.01, 0.02, 0.03, 0.0), &single);
        assert_eq!(r, Recommendation { k: 2, comm_mode: CommMode::Sequential, bound: Bound::Compute });
    }

    #[test]
    fn validation() {
        assert!(StageTimes::new(-1.0, 0.0, 0.0, 0.0).validate().is_err());
        let mut s = StageTimes::new(0.0, 0.0, 1.0, 0.0);
        s.first_segment_backward = 2.0;
        assert_eq!(s.validate(), Err(TimingError::SegmentLongerThanBackward));
        assert!(cluster(0, 0.0, 0.0, 0.0, 0.0, 0.0, 1).validate().is_err());
        assert!(cluster(2, 0.0, 0.0, 0.0, 0.0, 0.0, 0).validate().is_err());
        assert!(cluster(2, 0.0, f64::NAN, 0.0, 0.0, 0.0, 1).validate().is_err());
        assert!(cluster(2, 0.0, 0.0, 0.0, 0.0, 0.0, 1).validate().is_ok());
    }

    #[test]
    fn generic_over_f32() {
        let s = StageTimes::new(1.0f32, 2.0, 0.0, 3.0);
        assert_eq!(sync_total_time(2, &s), 12.0f32);
    }
}
