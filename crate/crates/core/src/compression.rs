//! Gradient codecs applied to blocks inside AllReduce.
//!
//! * `none`: raw little-endian `f32`.
//! * `trunc16`: the upper 16 bits of each `f32` encoding (sign, exponent,
//!   7 mantissa bits). The dropped half is rounded to nearest-even, and a
//!   value that would round up to infinity keeps its truncated encoding.
//! * `quant8`: `round(x / scale)` clamped to `[-127, 127]` with
//!   `scale = max|x| / 127`, ties away from zero.
//!
//! Serialized layout, little-endian: `u8 codec | u32 n_elems | f32 scale | payload`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Bytes before the payload in a serialized block.
pub const BLOCK_HEADER_LEN: usize = 1 + 4 + 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("non-finite input at index {index}")]
    NonFinite { index: usize },
    #[error("payload is {got} bytes, expected {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("unknown codec tag {0}")]
    UnknownCodec(u8),
    #[error("unknown codec name {0:?}")]
    UnknownName(String),
    #[error("serialized block shorter than its header")]
    Truncated,
    #[error("invalid scale {0}")]
    InvalidScale(f32),
    #[error("block too large: {0} elements")]
    TooLarge(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
#[repr(u8)]
pub enum CodecId {
    #[default]
    None = 0,
    Trunc16 = 1,
    Quant8 = 2,
}

impl CodecId {
    pub const ALL: [CodecId; 3] = [CodecId::None, CodecId::Trunc16, CodecId::Quant8];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Result<Self, CodecError> {
        match tag {
            0 => Ok(CodecId::None),
            1 => Ok(CodecId::Trunc16),
            2 => Ok(CodecId::Quant8),
            other => Err(CodecError::UnknownCodec(other)),
        }
    }

    pub fn bytes_per_elem(self) -> usize {
        match self {
            CodecId::None => 4,
            CodecId::Trunc16 => 2,
            CodecId::Quant8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CodecId::None => "none",
            CodecId::Trunc16 => "trunc16",
            CodecId::Quant8 => "quant8",
        }
    }
}

impl fmt::Display for CodecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CodecId {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CodecId::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CodecError::UnknownName(s.to_string()))
    }
}

/// A compressed run of gradient elements.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedBlock {
    codec: CodecId,
    n_elems: u32,
    scale: f32,
    payload: Vec<u8>,
}

impl CompressedBlock {
    pub fn codec(&self) -> CodecId {
        self.codec
    }

    pub fn n_elems(&self) -> usize {
        self.n_elems as usize
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn serialized_len(&self) -> usize {
        BLOCK_HEADER_LEN + self.payload.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.reserve(self.serialized_len());
        out.push(self.codec.tag());
        out.extend_from_slice(&self.n_elems.to_le_bytes());
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < BLOCK_HEADER_LEN {
            return Err(CodecError::Truncated);
        }
        let codec = CodecId::from_tag(bytes[0])?;
        let n_elems = u32::from_le_bytes(bytes[1..5].try_into().unwrap());
        let scale = f32::from_le_bytes(bytes[5..9].try_into().unwrap());
        let block = CompressedBlock { codec, n_elems, scale, payload: bytes[BLOCK_HEADER_LEN..].to_vec() };
        block.validate()?;
        Ok(block)
    }

    fn validate(&self) -> Result<(), CodecError> {
        let expected = self.n_elems() * self.codec.bytes_per_elem();
        if self.payload.len() != expected {
            return Err(CodecError::PayloadLength { expected, got: self.payload.len() });
        }
        let scale_ok = match self.codec {
            CodecId::Quant8 => self.scale.is_finite() && self.scale >= 0.0,
            _ => self.scale == 0.0,
        };
        if !scale_ok {
            return Err(CodecError::InvalidScale(self.scale));
        }
        Ok(())
    }
}

/// Serialized size of a block of `n_elems` elements, header included.
pub fn wire_size(codec: CodecId, n_elems: usize) -> usize {
    BLOCK_HEADER_LEN + payload_size(codec, n_elems)
}

/// Payload bytes only.
pub fn payload_size(codec: CodecId, n_elems: usize) -> usize {
    n_elems * codec.bytes_per_elem()
}

pub fn compress(values: &[f32], codec: CodecId) -> Result<CompressedBlock, CodecError> {
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(CodecError::NonFinite { index });
    }
    let n_elems = u32::try_from(values.len()).map_err(|_| CodecError::TooLarge(values.len()))?;
    let mut payload = Vec::with_capacity(payload_size(codec, values.len()));
    let mut scale = 0.0f32;
    match codec {
        CodecId::None => {
            for v in values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        CodecId::Trunc16 => {
            for v in values {
                payload.extend_from_slice(&truncate_to_u16(*v).to_le_bytes());
            }
        }
        CodecId::Quant8 => {
            let max_abs = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            if max_abs > 0.0 {
                scale = (max_abs / 127.0).max(f32::from_bits(1));
                let step = scale as f64;
                payload.extend(values.iter().map(|&v| quantize(v, step) as u8));
            } else {
                payload.resize(values.len(), 0);
            }
        }
    }
    Ok(CompressedBlock { codec, n_elems, scale, payload })
}

pub fn decompress(block: &CompressedBlock) -> Result<Vec<f32>, CodecError> {
    let mut out = vec![0.0f32; block.n_elems()];
    decompress_into(block, &mut out)?;
    Ok(out)
}

/// Decodes into `out`, which must have exactly `n_elems` entries.
pub fn decompress_into(block: &CompressedBlock, out: &mut [f32]) -> Result<(), CodecError> {
    block.validate()?;
    if out.len() != block.n_elems() {
        return Err(CodecError::PayloadLength {
            expected: out.len() * block.codec.bytes_per_elem(),
            got: block.payload.len(),
        });
    }
    match block.codec {
        CodecId::None => {
            for (o, c) in out.iter_mut().zip(block.payload.chunks_exact(4)) {
                *o = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        CodecId::Trunc16 => {
            for (o, c) in out.iter_mut().zip(block.payload.chunks_exact(2)) {
                *o = expand_u16(u16::from_le_bytes([c[0], c[1]]));
            }
        }
        CodecId::Quant8 => {
            let step = block.scale as f64;
            for (o, &c) in out.iter_mut().zip(&block.payload) {
                *o = dequantize(c as i8, step);
            }
        }
    }
    Ok(())
}

/// Upper half of the `f32` encoding, rounded to nearest-even.
pub fn truncate_to_u16(v: f32) -> u16 {
    let bits = v.to_bits();
    let lsb = (bits >> 16) & 1;
    let rounded = (bits.wrapping_add(0x7FFF + lsb) >> 16) as u16;
    if rounded & 0x7F80 == 0x7F80 {
        // rounding carried into the all-ones exponent
        (bits >> 16) as u16
    } else {
        rounded
    }
}

pub fn expand_u16(half: u16) -> f32 {
    f32::from_bits((half as u32) << 16)
}

fn quantize(v: f32, step: f64) -> i8 {
    // f64::round rounds half away from zero
    (v as f64 / step).round().clamp(-127.0, 127.0) as i8
}

fn dequantize(code: i8, step: f64) -> f32 {
    (code as f64 * step).clamp(-(f32::MAX as f64), f32::MAX as f64) as f32
}
