use super::TransportError;

/// Bytes between the length prefix and the payload.
const BODY_HEADER_LEN: usize = 1 + 4 + 2;
/// Full header on the wire: `u32 frame_length | u8 msg_type | u32 iteration | u16 block_index`.
pub const FRAME_HEADER_LEN: usize = 4 + BODY_HEADER_LEN;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Data = 0,
    Barrier = 1,
    Control = 2,
}

impl MsgType {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(MsgType::Data),
            1 => Some(MsgType::Barrier),
            2 => Some(MsgType::Control),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub iteration: u32,
    pub block_index: u16,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn data(iteration: u32, block_index: u16, payload: Vec<u8>) -> Self {
        Frame { msg_type: MsgType::Data, iteration, block_index, payload }
    }

    pub fn barrier(iteration: u32, block_index: u16) -> Self {
        Frame { msg_type: MsgType::Barrier, iteration, block_index, payload: Vec::new() }
    }

    pub fn control(iteration: u32, payload: Vec<u8>) -> Self {
        Frame { msg_type: MsgType::Control, iteration, block_index: 0, payload }
    }

    /// Little-endian wire encoding. `frame_length` counts the bytes after
    /// the length field.
    pub fn encode(&self) -> Vec<u8> {
        let body_len = BODY_HEADER_LEN + self.payload.len();
        let mut out = Vec::with_capacity(4 + body_len);
        out.extend_from_slice(&(body_len as u32).to_le_bytes());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.block_index.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes the bytes following the length prefix.
    pub fn decode_body(body: &[u8]) -> Result<Self, TransportError> {
        if body.len() < BODY_HEADER_LEN {
            return Err(TransportError::Malformed(format!("frame body of {} bytes", body.len())));
        }
        let msg_type = MsgType::from_tag(body[0])
            .ok_or_else(|| TransportError::Malformed(format!("message type {}", body[0])))?;
        Ok(Frame {
            msg_type,
            iteration: u32::from_le_bytes(body[1..5].try_into().unwrap()),
            block_index: u16::from_le_bytes(body[5..7].try_into().unwrap()),
            payload: body[BODY_HEADER_LEN..].to_vec(),
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TransportError> {
        if bytes.len() < 4 {
            return Err(TransportError::Malformed("missing length prefix".into()));
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        if bytes.len() != 4 + len {
            return Err(TransportError::Malformed(format!("length prefix {len} but {} bytes", bytes.len() - 4)));
        }
        Self::decode_body(&bytes[4..])
    }
}
