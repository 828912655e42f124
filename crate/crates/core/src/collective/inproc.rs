use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use super::{Frame, Transport, TransportError, DEFAULT_RECV_TIMEOUT, FRAME_HEADER_LEN};

const ABORT_POLL: Duration = Duration::from_millis(20);

/// Injected network delays.
///
/// Each node has one egress and one ingress port of the same throughput. A
/// message occupies the sender's egress and the receiver's ingress for
/// `bytes * secs_per_byte`, then arrives `latency` later. Receivers sleep
/// until that arrival time.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LinkModel {
    pub latency: Duration,
    pub secs_per_byte: f64,
}

impl LinkModel {
    pub fn new(latency: Duration, secs_per_byte: f64) -> Self {
        LinkModel { latency, secs_per_byte: secs_per_byte.max(0.0) }
    }

    /// `mbps` is megabits per second; `None` or zero means unlimited.
    pub fn from_alpha_ms_mbps(alpha_ms: f64, mbps: Option<f64>) -> Self {
        let secs_per_byte = match mbps {
            Some(m) if m > 0.0 => 8.0 / (m * 1e6),
            _ => 0.0,
        };
        LinkModel::new(Duration::from_secs_f64(alpha_ms.max(0.0) / 1e3), secs_per_byte)
    }

    pub fn is_active(&self) -> bool {
        !self.latency.is_zero() || self.secs_per_byte > 0.0
    }

    pub fn transfer_time(&self, bytes: usize) -> Duration {
        Duration::from_secs_f64(bytes as f64 * self.secs_per_byte)
    }
}

struct Port {
    egress_free: Instant,
    ingress_free: Instant,
}

struct Shared {
    link: LinkModel,
    ports: Mutex<Vec<Port>>,
    aborted: AtomicBool,
}

struct Envelope {
    frame: Frame,
    deliver_at: Option<Instant>,
}

/// Builds a fully connected in-process cluster.
pub struct InProcNetwork;

impl InProcNetwork {
    pub fn build(peers: usize, link: LinkModel) -> Vec<InProcEndpoint> {
        assert!(peers > 0, "cluster needs at least one rank");
        let now = Instant::now();
        let shared = Arc::new(Shared {
            link,
            ports: Mutex::new((0..peers).map(|_| Port { egress_free: now, ingress_free: now }).collect()),
            aborted: AtomicBool::new(false),
        });
        // channels[src][dst]
        let mut senders: Vec<Vec<Sender<Envelope>>> = vec![Vec::with_capacity(peers); peers];
        let mut receivers: Vec<Vec<Option<Receiver<Envelope>>>> = (0..peers).map(|_| vec![None; peers]).collect();
        for (src, row) in senders.iter_mut().enumerate() {
            for dst_row in receivers.iter_mut() {
                let (tx, rx) = unbounded();
                row.push(tx);
                dst_row[src] = Some(rx);
            }
        }
        senders
            .into_iter()
            .zip(receivers)
            .enumerate()
            .map(|(rank, (tx, rx))| InProcEndpoint {
                rank,
                peers,
                tx,
                rx: rx.into_iter().map(|r| r.unwrap()).collect(),
                shared: Arc::clone(&shared),
                timeout: DEFAULT_RECV_TIMEOUT,
            })
            .collect()
    }
}

pub struct InProcEndpoint {
    rank: usize,
    peers: usize,
    tx: Vec<Sender<Envelope>>,
    rx: Vec<Receiver<Envelope>>,
    shared: Arc<Shared>,
    timeout: Duration,
}

impl InProcEndpoint {
    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn link(&self) -> LinkModel {
        self.shared.link
    }

    fn schedule(&self, dest: usize, bytes: usize) -> Option<Instant> {
        let link = self.shared.link;
        if !link.is_active() {
            return None;
        }
        let mut ports = self.shared.ports.lock().unwrap();
        let start = Instant::now().max(ports[self.rank].egress_free).max(ports[dest].ingress_free);
        let done = start + link.transfer_time(bytes);
        ports[self.rank].egress_free = done;
        ports[dest].ingress_free = done;
        Some(done + link.latency)
    }
}

impl Transport for InProcEndpoint {
    fn rank(&self) -> usize {
        self.rank
    }

    fn peers(&self) -> usize {
        self.peers
    }

    fn send(&self, dest: usize, frame: Frame) -> Result<(), TransportError> {
        let tx = self.tx.get(dest).ok_or(TransportError::NoSuchPeer(dest))?;
        if self.shared.aborted.load(Ordering::Acquire) {
            return Err(TransportError::Aborted);
        }
        let deliver_at = self.schedule(dest, FRAME_HEADER_LEN + frame.payload.len());
        tx.send(Envelope { frame, deliver_at }).map_err(|_| TransportError::Disconnected(dest))
    }

    fn recv(&self, src: usize) -> Result<Frame, TransportError> {
        let rx = self.rx.get(src).ok_or(TransportError::NoSuchPeer(src))?;
        let deadline = Instant::now() + self.timeout;
        let envelope = loop {
            if self.shared.aborted.load(Ordering::Acquire) {
                return Err(TransportError::Aborted);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(TransportError::Timeout(self.timeout, src));
            }
            match rx.recv_timeout(ABORT_POLL.min(deadline - now)) {
                Ok(env) => break env,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => return Err(TransportError::Disconnected(src)),
            }
        };
        if let Some(at) = envelope.deliver_at {
            let now = Instant::now();
            if at > now {
                std::thread::sleep(at - now);
            }
        }
        Ok(envelope.frame)
    }

    fn abort(&self) {
        self.shared.aborted.store(true, Ordering::Release);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_per_pair() {
        let eps = InProcNetwork::build(2, LinkModel::default());
        for i in 0..5 {
            eps[0].send(1, Frame::data(i, 0, vec![i as u8])).unwrap();
        }
        for i in 0..5 {
            assert_eq!(eps[1].recv(0).unwrap().iteration, i);
        }
    }

    #[test]
    fn latency_is_applied() {
        let eps = InProcNetwork::build(2, LinkModel::new(Duration::from_millis(20), 0.0));
        let t = Instant::now();
        eps[0].send(1, Frame::data(0, 0, vec![])).unwrap();
        eps[1].recv(0).unwrap();
        assert!(t.elapsed() >= Duration::from_millis(20));
    }

    #[test]
    fn bandwidth_serializes_egress() {
        // 10 kB at 1 us/byte = 10 ms per message; two back-to-back sends take >= 20 ms
        let eps = InProcNetwork::build(3, LinkModel::new(Duration::ZERO, 1e-6));
        let t = Instant::now();
        eps[0].send(1, Frame::data(0, 0, vec![0; 10_000])).unwrap();
        eps[0].send(2, Frame::data(0, 0, vec![0; 10_000])).unwrap();
        eps[1].recv(0).unwrap();
        eps[2].recv(0).unwrap();
        assert!(t.elapsed() >= Duration::from_millis(20));
    }

    #[test]
    fn timeout_and_abort() {
        let mut eps = InProcNetwork::build(2, LinkModel::default());
        eps[1].set_timeout(Duration::from_millis(30));
        assert!(matches!(eps[1].recv(0), Err(TransportError::Timeout(_, 0))));
        eps[0].abort();
        assert_eq!(eps[1].recv(0), Err(TransportError::Aborted));
        assert_eq!(eps[0].send(1, Frame::barrier(0, 0)), Err(TransportError::Aborted));
        assert_eq!(eps[0].send(7, Frame::barrier(0, 0)), Err(TransportError::NoSuchPeer(7)));
    }

    #[test]
    fn mbps_conversion() {
        let l = LinkModel::from_alpha_ms_mbps(1.5, Some(8.0));
        assert_eq!(l.latency, Duration::from_micros(1500));
        assert!((l.secs_per_byte - 1e-6).abs() < 1e-18);
        assert!(!LinkModel::from_alpha_ms_mbps(0.0, None).is_active());
    }
}
