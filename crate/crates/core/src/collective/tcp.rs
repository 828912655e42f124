use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use super::{Frame, LinkModel, Transport, TransportError, DEFAULT_RECV_TIMEOUT, FRAME_HEADER_LEN};

const POLL: Duration = Duration::from_millis(10);
/// Upper bound on a single frame body; anything larger is treated as corruption.
const MAX_FRAME: usize = 1 << 30;

type Inbox = Receiver<(Instant, Result<Frame, TransportError>)>;

/// `host:base_port+r` for each rank.
pub fn default_roster(host: &str, base_port: u16, peers: usize) -> Vec<String> {
    (0..peers).map(|r| format!("{host}:{}", base_port as usize + r)).collect()
}

/// Full-mesh TCP endpoint.
///
/// Rank `r` listens on `roster[r]`, dials every lower rank and accepts every
/// higher one; each connection starts with the dialer's rank as a `u32 LE`.
/// One reader thread per peer drains frames into a queue so that sends never
/// block on an unread socket.
pub struct TcpEndpoint {
    rank: usize,
    peers: usize,
    writers: Vec<Option<Mutex<TcpStream>>>,
    inbox: Vec<Inbox>,
    loopback: Sender<(Instant, Result<Frame, TransportError>)>,
    timeout: Duration,
    link: LinkModel,
    aborted: Arc<AtomicBool>,
}

impl TcpEndpoint {
    pub fn connect<A: ToSocketAddrs>(rank: usize, roster: &[A], timeout: Duration) -> Result<Self, TransportError> {
        let peers = roster.len();
        if rank >= peers {
            return Err(TransportError::NoSuchPeer(rank));
        }
        let addrs: Vec<SocketAddr> = roster
            .iter()
            .map(|a| {
                a.to_socket_addrs()?
                    .next()
                    .ok_or_else(|| TransportError::Io("roster entry resolves to nothing".into()))
            })
            .collect::<Result<_, TransportError>>()?;
        let deadline = Instant::now() + timeout;
        let listener = TcpListener::bind(addrs[rank])?;
        listener.set_nonblocking(true)?;

        let mut streams: Vec<Option<TcpStream>> = (0..peers).map(|_| None).collect();
        for (peer, addr) in addrs.iter().enumerate().take(rank) {
            let mut stream = dial(*addr, deadline)?;
            stream.write_all(&(rank as u32).to_le_bytes())?;
            streams[peer] = Some(stream);
        }
        let mut pending = peers - rank - 1;
        while pending > 0 {
            match listener.accept() {
                Ok((mut stream, _)) => {
                    stream.set_nonblocking(false)?;
                    let mut hello = [0u8; 4];
                    stream.set_read_timeout(Some(timeout))?;
                    stream.read_exact(&mut hello)?;
                    let peer = u32::from_le_bytes(hello) as usize;
                    if peer <= rank || peer >= peers || streams[peer].is_some() {
                        return Err(TransportError::Malformed(format!("unexpected hello from rank {peer}")));
                    }
                    stream.set_read_timeout(None)?;
                    streams[peer] = Some(stream);
                    pending -= 1;
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::Timeout(timeout, rank));
                    }
                    std::thread::sleep(POLL);
                }
                Err(e) => return Err(e.into()),
            }
        }

        let aborted = Arc::new(AtomicBool::new(false));
        let (loopback, self_inbox) = unbounded();
        let mut writers = Vec::with_capacity(peers);
        let mut inbox = Vec::with_capacity(peers);
        for (peer, stream) in streams.into_iter().enumerate() {
            match stream {
                None => {
                    writers.push(None);
                    inbox.push(self_inbox.clone());
                }
                Some(stream) => {
                    stream.set_nodelay(true)?;
                    let reader = stream.try_clone()?;
                    let (tx, rx) = unbounded();
                    std::thread::Builder::new()
                        .name(format!("tcp-rx-{rank}<-{peer}"))
                        .spawn(move || read_frames(reader, peer, tx))?;
                    writers.push(Some(Mutex::new(stream)));
                    inbox.push(rx);
                }
            }
        }
        Ok(TcpEndpoint {
            rank,
            peers,
            writers,
            inbox,
            loopback,
            timeout: DEFAULT_RECV_TIMEOUT,
            link: LinkModel::default(),
            aborted,
        })
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    /// Extra receiver-side delay on top of the real network.
    pub fn set_link_model(&mut self, link: LinkModel) {
        self.link = link;
    }
}

fn dial(addr: SocketAddr, deadline: Instant) -> Result<TcpStream, TransportError> {
    loop {
        match TcpStream::connect_timeout(&addr, Duration::from_millis(500)) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() < deadline => {
                let _ = e;
                std::thread::sleep(POLL);
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn read_frames(mut stream: TcpStream, peer: usize, tx: Sender<(Instant, Result<Frame, TransportError>)>) {
    loop {
        let mut len = [0u8; 4];
        if stream.read_exact(&mut len).is_err() {
            let _ = tx.send((Instant::now(), Err(TransportError::Disconnected(peer))));
            return;
        }
        let len = u32::from_le_bytes(len) as usize;
        if len > MAX_FRAME {
            let _ = tx.send((Instant::now(), Err(TransportError::Malformed(format!("frame of {len} bytes")))));
            return;
        }
        let mut body = vec![0u8; len];
        if stream.read_exact(&mut body).is_err() {
            let _ = tx.send((Instant::now(), Err(TransportError::Disconnected(peer))));
            return;
        }
        let frame = Frame::decode_body(&body);
        let failed = frame.is_err();
        if tx.send((Instant::now(), frame)).is_err() || failed {
            return;
        }
    }
}

impl Transport for TcpEndpoint {
    fn rank(&self) -> usize {
        self.rank
    }

    fn peers(&self) -> usize {
        self.peers
    }

    fn send(&self, dest: usize, frame: Frame) -> Result<(), TransportError> {
        if dest >= self.peers {
            return Err(TransportError::NoSuchPeer(dest));
        }
        if self.aborted.load(Ordering::Acquire) {
            return Err(TransportError::Aborted);
        }
        match &self.writers[dest] {
            None => self.loopback.send((Instant::now(), Ok(frame))).map_err(|_| TransportError::Disconnected(dest)),
            Some(w) => {
                let bytes = frame.encode();
                let mut stream = w.lock().unwrap();
                stream.write_all(&bytes).map_err(|_| TransportError::Disconnected(dest))
            }
        }
    }

    fn recv(&self, src: usize) -> Result<Frame, TransportError> {
        let inbox = self.inbox.get(src).ok_or(TransportError::NoSuchPeer(src))?;
        let (arrived, frame) = match inbox.recv_timeout(self.timeout) {
            Ok(v) => v,
            Err(RecvTimeoutError::Timeout) => return Err(TransportError::Timeout(self.timeout, src)),
            Err(RecvTimeoutError::Disconnected) => return Err(TransportError::Disconnected(src)),
        };
        let frame = frame?;
        if self.link.is_active() {
            let at = arrived + self.link.latency + self.link.transfer_time(FRAME_HEADER_LEN + frame.payload.len());
            let now = Instant::now();
            if at > now {
                std::thread::sleep(at - now);
            }
        }
        Ok(frame)
    }

    fn abort(&self) {
        self.aborted.store(true, Ordering::Release);
        for w in self.writers.iter().flatten() {
            if let Ok(s) = w.lock() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
    }
}

impl Drop for TcpEndpoint {
    fn drop(&mut self) {
        for w in self.writers.iter().flatten() {
            if let Ok(s) = w.lock() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
    }
}
