//! Ring AllReduce: `p - 1` reduce-scatter steps ("transmit-and-reduce")
//! followed by `p - 1` allgather steps, one block per step.
//!
//! Blocks travel compressed. A receiver decompresses, adds its own block in
//! full precision and recompresses the partial sum (fresh scale) before
//! forwarding it. The owner of a fully reduced block compresses it once; that
//! encoding is forwarded verbatim during allgather, so every rank decodes the
//! same bytes.

use std::ops::Range;

use crossbeam_channel::unbounded;

use super::{CollectiveError, Frame, MsgType, Transport};
use crate::compression::{compress, decompress_into, CodecId, CompressedBlock};

/// Sub-blocks per ring block in [`pipelined_allreduce`].
pub const DEFAULT_PIPELINE_CHUNKS: usize = 4;

/// `parts` contiguous blocks covering `0..len`; the first `len % parts`
/// blocks hold one extra element.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPartition {
    len: usize,
    parts: usize,
}

impl BlockPartition {
    /// # Panics
    /// If `parts == 0`.
    pub fn new(len: usize, parts: usize) -> Self {
        assert!(parts > 0, "partition needs at least one block");
        BlockPartition { len, parts }
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn total_len(&self) -> usize {
        self.len
    }

    pub fn block(&self, i: usize) -> Range<usize> {
        let base = self.len / self.parts;
        let extra = self.len % self.parts;
        let start = i * base + i.min(extra);
        let len = base + usize::from(i < extra);
        start..start + len
    }

    pub fn block_len(&self, i: usize) -> usize {
        self.block(i).len()
    }

    pub fn blocks(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.parts).map(|i| self.block(i))
    }
}

/// Logical ring over `p` ranks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RingTopology {
    p: usize,
}

impl RingTopology {
    pub fn new(p: usize) -> Self {
        assert!(p > 0);
        RingTopology { p }
    }

    pub fn successor(&self, rank: usize) -> usize {
        (rank + 1) % self.p
    }

    pub fn predecessor(&self, rank: usize) -> usize {
        (rank + self.p - 1) % self.p
    }
}

/// Sums `local` across all ranks; every rank gets the same result.
pub fn ring_allreduce<T: Transport + ?Sized>(
    local: &[f32],
    transport: &T,
    codec: CodecId,
    iteration: u32,
) -> Result<Vec<f32>, CollectiveError> {
    let blocks = ring_allreduce_blocks(local, transport, codec, iteration)?;
    assemble(&blocks, local.len(), "ring_allreduce")
}

/// Like [`ring_allreduce`] but returns the reduced blocks still encoded,
/// in element order.
pub fn ring_allreduce_blocks<T: Transport + ?Sized>(
    local: &[f32],
    transport: &T,
    codec: CodecId,
    iteration: u32,
) -> Result<Vec<CompressedBlock>, CollectiveError> {
    let succ = RingTopology::new(transport.peers()).successor(transport.rank());
    ring_schedule("ring_allreduce", local, transport, codec, iteration, 1, |index, payload| {
        transport.send(succ, Frame::data(iteration, index, payload)).map_err(|source| CollectiveError::Transport {
            op: "ring_allreduce",
            step: usize::from(index),
            rank: transport.rank(),
            source,
        })
    })
}

/// Ring AllReduce with each block split into `chunks` sub-blocks that are
/// forwarded as soon as they are reduced. A dedicated sender thread
/// transmits chunk `i - 1` while chunk `i` is decompressed, summed and
/// recompressed.
///
/// For `none` and `trunc16` the result is bit-identical to [`ring_allreduce`];
/// `quant8` picks a scale per chunk and so may differ.
pub fn pipelined_allreduce<T: Transport + ?Sized>(
    local: &[f32],
    transport: &T,
    codec: CodecId,
    iteration: u32,
    chunks: usize,
) -> Result<Vec<f32>, CollectiveError> {
    let blocks = pipelined_allreduce_blocks(local, transport, codec, iteration, chunks)?;
    assemble(&blocks, local.len(), "pipelined_allreduce")
}

pub fn pipelined_allreduce_blocks<T: Transport + ?Sized>(
    local: &[f32],
    transport: &T,
    codec: CodecId,
    iteration: u32,
    chunks: usize,
) -> Result<Vec<CompressedBlock>, CollectiveError> {
    const OP: &str = "pipelined_allreduce";
    if chunks == 0 {
        return Err(CollectiveError::Config { op: OP, detail: "chunks must be positive".into() });
    }
    let rank = transport.rank();
    let succ = RingTopology::new(transport.peers()).successor(rank);
    std::thread::scope(|scope| {
        let (tx, rx) = unbounded::<(u16, Vec<u8>)>();
        let sender = scope.spawn(move || {
            for (index, payload) in rx {
                transport.send(succ, Frame::data(iteration, index, payload)).map_err(|source| {
                    CollectiveError::Transport { op: OP, step: usize::from(index) / chunks, rank, source }
                })?;
            }
            Ok::<(), CollectiveError>(())
        });
        let result = ring_schedule(OP, local, transport, codec, iteration, chunks, |index, payload| {
            tx.send((index, payload))
                .map_err(|_| CollectiveError::Config { op: OP, detail: "sender thread exited".into() })
        });
        drop(tx);
        let sent = sender.join().expect("sender thread panicked");
        match (result, sent) {
            (Err(e), _) => Err(e),
            (Ok(_), Err(e)) => Err(e),
            (Ok(blocks), Ok(())) => Ok(blocks),
        }
    })
}

/// Decodes blocks in order into one vector of `len` elements.
pub(crate) fn assemble(blocks: &[CompressedBlock], len: usize, op: &'static str) -> Result<Vec<f32>, CollectiveError> {
    let mut out = vec![0.0f32; len];
    let mut at = 0;
    for block in blocks {
        let end = at + block.n_elems();
        if end > len {
            return Err(CollectiveError::Config { op, detail: format!("blocks exceed {len} elements") });
        }
        decompress_into(block, &mut out[at..end])
            .map_err(|source| CollectiveError::Codec { op, step: 0, rank: 0, source })?;
        at = end;
    }
    if at != len {
        return Err(CollectiveError::Config { op, detail: format!("blocks cover {at} of {len} elements") });
    }
    Ok(out)
}

/// Shared reduce-scatter / allgather schedule. `emit` hands an outgoing
/// payload (tagged with its message index) to the transport.
fn ring_schedule<T, F>(
    op: &'static str,
    local: &[f32],
    transport: &T,
    codec: CodecId,
    iteration: u32,
    chunks: usize,
    mut emit: F,
) -> Result<Vec<CompressedBlock>, CollectiveError>
where
    T: Transport + ?Sized,
    F: FnMut(u16, Vec<u8>) -> Result<(), CollectiveError>,
{
    let p = transport.peers();
    let rank = transport.rank();
    if p == 0 || rank >= p {
        return Err(CollectiveError::Config { op, detail: format!("rank {rank} of {p}") });
    }
    if p == 1 {
        let block = compress(local, CodecId::None).map_err(|source| CollectiveError::Codec { op, step: 0, rank, source })?;
        return Ok(vec![block]);
    }
    let steps = 2 * (p - 1);
    if steps * chunks > usize::from(u16::MAX) {
        return Err(CollectiveError::Config { op, detail: format!("{steps} steps x {chunks} chunks overflow u16") });
    }
    let pred = RingTopology::new(p).predecessor(rank);
    let part = BlockPartition::new(local.len(), p);
    let sub: Vec<BlockPartition> =
        (0..p).map(|b| BlockPartition::new(part.block_len(b), chunks.min(part.block_len(b)).max(1))).collect();
    // element range of chunk c of block b
    let range = |b: usize, c: usize| {
        let r = sub[b].block(c);
        part.block(b).start + r.start..part.block(b).start + r.end
    };
    let index = |step: usize, c: usize| (step * chunks + c) as u16;
    let codec_err = |step, source| CollectiveError::Codec { op, step, rank, source };

    let mut acc = local.to_vec();
    let mut scratch = Vec::new();

    // reduce-scatter: step s sends block (rank - s) and receives block (rank - s - 1)
    for c in 0..sub[rank].parts() {
        let block = compress(&acc[range(rank, c)], codec).map_err(|e| codec_err(0, e))?;
        emit(index(0, c), block.to_bytes())?;
    }
    for s in 0..p - 1 {
        let b = (rank + p - s - 1) % p;
        for c in 0..sub[b].parts() {
            let r = range(b, c);
            let block = receive_block(op, transport, pred, iteration, s, index(s, c), codec, r.len())?;
            scratch.resize(r.len(), 0.0);
            decompress_into(&block, &mut scratch).map_err(|e| codec_err(s, e))?;
            for (a, x) in acc[r.clone()].iter_mut().zip(&scratch) {
                *a = *x + *a;
            }
            if s + 1 < p - 1 {
                let out = compress(&acc[r], codec).map_err(|e| codec_err(s + 1, e))?;
                emit(index(s + 1, c), out.to_bytes())?;
            }
        }
    }

    // allgather: the owner encodes its block once, everyone forwards bytes
    let own = (rank + 1) % p;
    let mut result: Vec<Vec<Option<CompressedBlock>>> = sub.iter().map(|s| vec![None; s.parts()]).collect();
    for c in 0..sub[own].parts() {
        let block = compress(&acc[range(own, c)], codec).map_err(|e| codec_err(p - 1, e))?;
        emit(index(p - 1, c), block.to_bytes())?;
        result[own][c] = Some(block);
    }
    for s in 0..p - 1 {
        let step = p - 1 + s;
        let b = (rank + p - s) % p;
        for c in 0..sub[b].parts() {
            let block = receive_block(op, transport, pred, iteration, step, index(step, c), codec, range(b, c).len())?;
            if s + 1 < p - 1 {
                emit(index(step + 1, c), block.to_bytes())?;
            }
            result[b][c] = Some(block);
        }
    }
    Ok(result.into_iter().flatten().map(|b| b.expect("every chunk received")).collect())
}

#[allow(clippy::too_many_arguments)]
fn receive_block<T: Transport + ?Sized>(
    op: &'static str,
    transport: &T,
    src: usize,
    iteration: u32,
    step: usize,
    expected_index: u16,
    codec: CodecId,
    expected_len: usize,
) -> Result<CompressedBlock, CollectiveError> {
    let rank = transport.rank();
    let frame = transport.recv(src).map_err(|source| CollectiveError::Transport { op, step, rank, source })?;
    let protocol = |expected: String, got: String| CollectiveError::Protocol { op, step, rank, expected, got };
    if frame.msg_type != MsgType::Data || frame.iteration != iteration || frame.block_index != expected_index {
        return Err(protocol(
            format!("data frame iteration {iteration} index {expected_index}"),
            format!("{:?} frame iteration {} index {}", frame.msg_type, frame.iteration, frame.block_index),
        ));
    }
    let block =
        CompressedBlock::from_bytes(&frame.payload).map_err(|source| CollectiveError::Codec { op, step, rank, source })?;
    if block.codec() != codec || block.n_elems() != expected_len {
        return Err(protocol(
            format!("{codec} block of {expected_len} elements"),
            format!("{} block of {} elements", block.codec(), block.n_elems()),
        ));
    }
    Ok(block)
}
