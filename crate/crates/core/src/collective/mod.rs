//! Transports and collectives.
//!
//! A [`Transport`] moves [`Frame`]s between ranks with FIFO, exactly-once
//! delivery per (source, destination) pair. Collectives are written against
//! the trait and run unchanged over the in-process network and over TCP.

mod frame;
mod inproc;
mod ring;
mod star;
mod tcp;

pub use frame::{Frame, MsgType, FRAME_HEADER_LEN};
pub use inproc::{InProcEndpoint, InProcNetwork, LinkModel};
pub use ring::{
    pipelined_allreduce, pipelined_allreduce_blocks, ring_allreduce, ring_allreduce_blocks, BlockPartition,
    RingTopology, DEFAULT_PIPELINE_CHUNKS,
};
pub use star::{barrier, broadcast_from_root, gather_to_root};
pub use tcp::{default_roster, TcpEndpoint};

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use thiserror::Error;

use crate::compression::CodecError;

/// Default bound on a single blocking receive.
pub const DEFAULT_RECV_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("rank {0} is outside the cluster")]
    NoSuchPeer(usize),
    #[error("timed out after {0:?} waiting for rank {1}")]
    Timeout(Duration, usize),
    #[error("link to rank {0} closed")]
    Disconnected(usize),
    #[error("run aborted by another worker")]
    Aborted,
    #[error("io: {0}")]
    Io(String),
    #[error("malformed frame: {0}")]
    Malformed(String),
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        TransportError::Io(e.to_string())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CollectiveError {
    #[error("{op} step {step} on rank {rank}: {source}")]
    Transport {
        op: &'static str,
        step: usize,
        rank: usize,
        #[source]
        source: TransportError,
    },
    #[error("{op} step {step} on rank {rank}: {source}")]
    Codec {
        op: &'static str,
        step: usize,
        rank: usize,
        #[source]
        source: CodecError,
    },
    #[error("{op} step {step} on rank {rank}: expected {expected}, got {got}")]
    Protocol { op: &'static str, step: usize, rank: usize, expected: String, got: String },
    #[error("{op}: {detail}")]
    Config { op: &'static str, detail: String },
}

/// Point-to-point message passing between `peers()` ranks.
///
/// `send` and `recv` take `&self`; an endpoint may be used from several
/// threads as long as they talk to disjoint peers.
pub trait Transport: Send + Sync {
    fn rank(&self) -> usize;
    fn peers(&self) -> usize;
    fn send(&self, dest: usize, frame: Frame) -> Result<(), TransportError>;
    /// Blocks until the next frame from `src` arrives.
    fn recv(&self, src: usize) -> Result<Frame, TransportError>;
    /// Tells every other endpoint that this run is over.
    fn abort(&self) {}
}

impl<T: Transport + ?Sized> Transport for &T {
    fn rank(&self) -> usize {
        (**self).rank()
    }
    fn peers(&self) -> usize {
        (**self).peers()
    }
    fn send(&self, dest: usize, frame: Frame) -> Result<(), TransportError> {
        (**self).send(dest, frame)
    }
    fn recv(&self, src: usize) -> Result<Frame, TransportError> {
        (**self).recv(src)
    }
    fn abort(&self) {
        (**self).abort()
    }
}

/// Snapshot of what an [`Instrumented`] transport has sent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrafficStats {
    pub data_messages: u64,
    /// Frame payload bytes of data messages (serialized blocks, headers included).
    pub data_bytes: u64,
    pub control_messages: u64,
}

/// Counts sent frames by type.
pub struct Instrumented<T> {
    inner: T,
    data_messages: AtomicU64,
    data_bytes: AtomicU64,
    control_messages: AtomicU64,
}

impl<T: Transport> Instrumented<T> {
    pub fn new(inner: T) -> Self {
        Instrumented {
            inner,
            data_messages: AtomicU64::new(0),
            data_bytes: AtomicU64::new(0),
            control_messages: AtomicU64::new(0),
        }
    }

    pub fn stats(&self) -> TrafficStats {
        TrafficStats {
            data_messages: self.data_messages.load(Ordering::Relaxed),
            data_bytes: self.data_bytes.load(Ordering::Relaxed),
            control_messages: self.control_messages.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.data_messages.store(0, Ordering::Relaxed);
        self.data_bytes.store(0, Ordering::Relaxed);
        self.control_messages.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }
}

impl<T: Transport> Transport for Instrumented<T> {
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    fn peers(&self) -> usize {
        self.inner.peers()
    }

    fn send(&self, dest: usize, frame: Frame) -> Result<(), TransportError> {
        if frame.msg_type == MsgType::Data {
            self.data_messages.fetch_add(1, Ordering::Relaxed);
            self.data_bytes.fetch_add(frame.payload.len() as u64, Ordering::Relaxed);
        } else {
            self.control_messages.fetch_add(1, Ordering::Relaxed);
        }
        self.inner.send(dest, frame)
    }

    fn recv(&self, src: usize) -> Result<Frame, TransportError> {
        self.inner.recv(src)
    }

    fn abort(&self) {
        self.inner.abort()
    }
}
