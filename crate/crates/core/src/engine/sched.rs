//! Thread scheduling hints for workers that share CPU cores.

/// Drops the calling thread to idle priority until the guard is dropped.
pub(crate) struct IdlePriority {
    #[cfg(target_os = "linux")]
    previous: Option<libc::c_int>,
}

impl IdlePriority {
    pub(crate) fn enter(enabled: bool) -> Self {
        #[cfg(target_os = "linux")]
        {
            if !enabled {
                return IdlePriority { previous: None };
            }
            // SAFETY: pid 0 targets the calling thread; the param struct is valid.
            unsafe {
                let previous = libc::sched_getscheduler(0);
                let param = libc::sched_param { sched_priority: 0 };
                let ok = previous >= 0 && libc::sched_setscheduler(0, libc::SCHED_IDLE, &param) == 0;
                IdlePriority { previous: ok.then_some(previous) }
            }
        }
        #[cfg(not(target_os = "linux"))]
        {
            let _ = enabled;
            IdlePriority {}
        }
    }
}

impl Drop for IdlePriority {
    fn drop(&mut self) {
        #[cfg(target_os = "linux")]
        if let Some(policy) = self.previous {
            let param = libc::sched_param { sched_priority: 0 };
            // SAFETY: as above. Failure leaves the thread at idle priority,
            // which is harmless for correctness.
            unsafe {
                libc::sched_setscheduler(0, policy, &param);
            }
        }
    }
}
