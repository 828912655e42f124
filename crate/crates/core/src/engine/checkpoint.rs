//! Flat parameter checkpoints: `PSGD`, u32 version, u64 count, then
//! little-endian f32 values.

use std::io::{self, Read, Write};

const MAGIC: &[u8; 4] = b"PSGD";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut out: W, params: &[f32]) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(params.len() * 4);
    for v in params {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_checkpoint<R: Read>(mut input: R) -> io::Result<Vec<f32>> {
    let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
    let mut head = [0u8; 16];
    input.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(bad("not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(head[8..16].try_into().unwrap());
    let bytes = usize::try_from(len).ok().and_then(|n| n.checked_mul(4)).ok_or_else(|| bad("length overflow".into()))?;
    let mut body = Vec::new();
    input.take(bytes as u64).read_to_end(&mut body)?;
    if body.len() != bytes {
        return Err(bad(format!("expected {bytes} payload bytes, got {}", body.len())));
    }
    Ok(body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}
