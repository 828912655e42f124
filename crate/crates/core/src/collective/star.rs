//! Star-shaped collectives used by the parameter-server baseline, plus a
//! central barrier.

use super::{CollectiveError, Frame, MsgType, Transport};
use crate::compression::{compress, decompress, CodecId, CompressedBlock};

const RELEASE: u16 = 1;

/// Every rank sends `local` to `root` uncompressed. The root returns the
/// elementwise sum, accumulated in rank order; other ranks return `None`.
pub fn gather_to_root<T: Transport + ?Sized>(
    local: &[f32],
    root: usize,
    transport: &T,
    iteration: u32,
) -> Result<Option<Vec<f32>>, CollectiveError> {
    const OP: &str = "gather_to_root";
    let (rank, p) = (transport.rank(), transport.peers());
    if root >= p {
        return Err(CollectiveError::Config { op: OP, detail: format!("root {root} of {p}") });
    }
    if rank != root {
        let payload = encode(OP, rank, local)?;
        transport
            .send(root, Frame::data(iteration, rank as u16, payload))
            .map_err(|source| CollectiveError::Transport { op: OP, step: 0, rank, source })?;
        return Ok(None);
    }
    let mut sum: Option<Vec<f32>> = None;
    for src in 0..p {
        let values = if src == root {
            local.to_vec()
        } else {
            let block = receive(OP, transport, src, iteration, MsgType::Data, src as u16, 0)?;
            decompress(&block).map_err(|source| CollectiveError::Codec { op: OP, step: 0, rank, source })?
        };
        if values.len() != local.len() {
            return Err(CollectiveError::Protocol {
                op: OP,
                step: 0,
                rank,
                expected: format!("{} elements", local.len()),
                got: format!("{} elements from rank {src}", values.len()),
            });
        }
        match &mut sum {
            None => sum = Some(values),
            Some(acc) => acc.iter_mut().zip(&values).for_each(|(a, v)| *a += *v),
        }
    }
    Ok(sum)
}

/// `root` sends `value` to every other rank; all ranks return a bit-exact copy.
/// Non-root ranks may pass `None`.
pub fn broadcast_from_root<T: Transport + ?Sized>(
    value: Option<&[f32]>,
    root: usize,
    transport: &T,
    iteration: u32,
) -> Result<Vec<f32>, CollectiveError> {
    const OP: &str = "broadcast_from_root";
    let (rank, p) = (transport.rank(), transport.peers());
    if root >= p {
        return Err(CollectiveError::Config { op: OP, detail: format!("root {root} of {p}") });
    }
    if rank == root {
        let value = value.ok_or(CollectiveError::Config { op: OP, detail: "root has no value".into() })?;
        let payload = encode(OP, rank, value)?;
        for dest in (0..p).filter(|&d| d != root) {
            transport
                .send(dest, Frame::data(iteration, root as u16, payload.clone()))
                .map_err(|source| CollectiveError::Transport { op: OP, step: dest, rank, source })?;
        }
        return Ok(value.to_vec());
    }
    let block = receive(OP, transport, root, iteration, MsgType::Data, root as u16, 0)?;
    decompress(&block).map_err(|source| CollectiveError::Codec { op: OP, step: 0, rank, source })
}

/// No rank returns before every rank has entered. Rank 0 collects arrivals
/// and then releases everyone.
pub fn barrier<T: Transport + ?Sized>(transport: &T, iteration: u32) -> Result<(), CollectiveError> {
    const OP: &str = "barrier";
    let (rank, p) = (transport.rank(), transport.peers());
    if p == 1 {
        return Ok(());
    }
    let transport_err = |step, source| CollectiveError::Transport { op: OP, step, rank, source };
    if rank == 0 {
        for src in 1..p {
            expect_barrier(OP, transport, src, iteration, 0)?;
        }
        for dest in 1..p {
            transport.send(dest, Frame::barrier(iteration, RELEASE)).map_err(|e| transport_err(1, e))?;
        }
    } else {
        transport.send(0, Frame::barrier(iteration, 0)).map_err(|e| transport_err(0, e))?;
        expect_barrier(OP, transport, 0, iteration, RELEASE)?;
    }
    Ok(())
}

fn encode(op: &'static str, rank: usize, values: &[f32]) -> Result<Vec<u8>, CollectiveError> {
    compress(values, CodecId::None)
        .map(|b| b.to_bytes())
        .map_err(|source| CollectiveError::Codec { op, step: 0, rank, source })
}

fn expect_barrier<T: Transport + ?Sized>(
    op: &'static str,
    transport: &T,
    src: usize,
    iteration: u32,
    index: u16,
) -> Result<(), CollectiveError> {
    let rank = transport.rank();
    let frame = transport.recv(src).map_err(|source| CollectiveError::Transport { op, step: 0, rank, source })?;
    if frame.msg_type != MsgType::Barrier || frame.iteration != iteration || frame.block_index != index {
        return Err(CollectiveError::Protocol {
            op,
            step: 0,
            rank,
            expected: format!("barrier {iteration}/{index} from rank {src}"),
            got: format!("{:?} {}/{}", frame.msg_type, frame.iteration, frame.block_index),
        });
    }
    Ok(())
}

fn receive<T: Transport + ?Sized>(
    op: &'static str,
    transport: &T,
    src: usize,
    iteration: u32,
    msg_type: MsgType,
    index: u16,
    step: usize,
) -> Result<CompressedBlock, CollectiveError> {
    let rank = transport.rank();
    let frame = transport.recv(src).map_err(|source| CollectiveError::Transport { op, step, rank, source })?;
    if frame.msg_type != msg_type || frame.iteration != iteration || frame.block_index != index {
        return Err(CollectiveError::Protocol {
            op,
            step,
            rank,
            expected: format!("{msg_type:?} {iteration}/{index} from rank {src}"),
            got: format!("{:?} {}/{}", frame.msg_type, frame.iteration, frame.block_index),
        });
    }
    CompressedBlock::from_bytes(&frame.payload).map_err(|source| CollectiveError::Codec { op, step, rank, source })
}
