//! Keeps the CPU from going idle while in-process workers sleep on
//! injected network delays.
//!
//! On virtual machines a halted vCPU can take milliseconds to wake, which
//! inflates every injected delay by a random amount. A spinning thread at
//! idle priority keeps the vCPU running without taking time from any thread
//! that wants it.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

pub struct KeepAwake {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl KeepAwake {
    /// Starts the spinner if `enabled`.
    pub fn start(enabled: bool) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let handle = enabled.then(|| {
            let stop = Arc::clone(&stop);
            std::thread::Builder::new()
                .name("keep-awake".into())
                .spawn(move || {
                    lower_priority();
                    while !stop.load(Ordering::Relaxed) {
                        std::hint::spin_loop();
                    }
                })
                .expect("spawn keep-awake thread")
        });
        KeepAwake { stop, handle }
    }

    pub fn is_running(&self) -> bool {
        self.handle.is_some()
    }
}

impl Drop for KeepAwake {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(target_os = "linux")]
fn lower_priority() {
    let param = libc::sched_param { sched_priority: 0 };
    // SAFETY: pid 0 targets the calling thread. Without SCHED_IDLE fall back
    // to the lowest nice value.
    unsafe {
        if libc::sched_setscheduler(0, libc::SCHED_IDLE, &param) != 0 {
            libc::setpriority(libc::PRIO_PROCESS, 0, 19);
        }
    }
}

#[cfg(not(target_os = "linux"))]
fn lower_priority() {}
