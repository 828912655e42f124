use std::sync::{Condvar, Mutex, MutexGuard};

use super::EngineError;
use crate::compression::{decompress_into, CompressedBlock};

/// Contents of one gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub enum Aggregated {
    /// Zero initialization: the update is a no-op.
    Zero,
    /// AllReduce result, one block per ring partition in element order.
    Blocks(Vec<CompressedBlock>),
}

impl Aggregated {
    /// Decoded sum, or `None` for a zero slot.
    pub fn decode(&self, len: usize) -> Result<Option<Vec<f32>>, EngineError> {
        match self {
            Aggregated::Zero => Ok(None),
            Aggregated::Blocks(blocks) => {
                let total: usize = blocks.iter().map(CompressedBlock::n_elems).sum();
                if total != len {
                    return Err(EngineError::Buffer(format!("aggregated length {total} != {len}")));
                }
                let mut out = vec![0.0f32; len];
                let mut at = 0;
                for b in blocks {
                    decompress_into(b, &mut out[at..at + b.n_elems()])?;
                    at += b.n_elems();
                }
                Ok(Some(out))
            }
        }
    }
}

#[derive(Debug)]
struct Slot {
    /// Latest tag written to this slot.
    tag: Option<i64>,
    value: Option<Aggregated>,
}

#[derive(Debug)]
struct BufferState {
    slots: Vec<Slot>,
    aborted: bool,
}

/// `K` slots of aggregated gradients indexed by `tag mod K`.
///
/// Each tag is written once and read once; a write into a slot whose
/// previous value has not been consumed is a logic error.
#[derive(Debug)]
pub struct GradientBuffer {
    state: Mutex<BufferState>,
    ready: Condvar,
}

impl GradientBuffer {
    pub fn new(k: usize) -> Self {
        assert!(k >= 1, "buffer needs at least one slot");
        let slots = (0..k).map(|_| Slot { tag: None, value: None }).collect();
        GradientBuffer { state: Mutex::new(BufferState { slots, aborted: false }), ready: Condvar::new() }
    }

    pub fn slots(&self) -> usize {
        self.lock().slots.len()
    }

    fn lock(&self) -> MutexGuard<'_, BufferState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn put(&self, tag: i64, value: Aggregated) -> Result<(), EngineError> {
        let mut st = self.lock();
        if st.aborted {
            return Err(EngineError::Aborted);
        }
        let k = st.slots.len() as i64;
        let slot = &mut st.slots[tag.rem_euclid(k) as usize];
        if slot.value.is_some() {
            return Err(EngineError::Buffer(format!(
                "double ready: tag {tag} written over unconsumed tag {}",
                slot.tag.unwrap_or_default()
            )));
        }
        if slot.tag.is_some_and(|prev| prev >= tag) {
            return Err(EngineError::Buffer(format!("tag {tag} written twice or out of order")));
        }
        slot.tag = Some(tag);
        slot.value = Some(value);
        drop(st);
        self.ready.notify_all();
        Ok(())
    }

    pub fn put_zero(&self, tag: i64) -> Result<(), EngineError> {
        self.put(tag, Aggregated::Zero)
    }

    /// Block until `tag` is ready, then take it out of its slot.
    pub fn take(&self, tag: i64) -> Result<Aggregated, EngineError> {
        let mut st = self.lock();
        loop {
            if st.aborted {
                return Err(EngineError::Aborted);
            }
            let k = st.slots.len() as i64;
            let slot = &mut st.slots[tag.rem_euclid(k) as usize];
            if slot.tag == Some(tag) {
                if let Some(v) = slot.value.take() {
                    return Ok(v);
                }
                return Err(EngineError::Buffer(format!("tag {tag} consumed twice")));
            }
            if slot.tag.is_some_and(|t| t > tag) {
                return Err(EngineError::Buffer(format!("tag {tag} was overwritten before use")));
            }
            st = self.ready.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub fn abort(&self) {
        self.lock().aborted = true;
        self.ready.notify_all();
    }
}

/// Single-slot hand-off of tagged values between two threads.
#[derive(Debug)]
pub struct Mailbox<T> {
    state: Mutex<(Option<(u64, T)>, bool)>,
    changed: Condvar,
}

impl<T> Default for Mailbox<T> {
    fn default() -> Self {
        Mailbox { state: Mutex::new((None, false)), changed: Condvar::new() }
    }
}

impl<T> Mailbox<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Block until the slot is empty, then fill it.
    pub fn put(&self, tag: u64, value: T) -> Result<(), EngineError> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        while st.0.is_some() && !st.1 {
            st = self.changed.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        if st.1 {
            return Err(EngineError::Aborted);
        }
        st.0 = Some((tag, value));
        drop(st);
        self.changed.notify_all();
        Ok(())
    }

    /// Block until a value arrives; it must carry `tag`.
    pub fn take(&self, tag: u64) -> Result<T, EngineError> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            if st.1 {
                return Err(EngineError::Aborted);
            }
            if let Some((got, value)) = st.0.take() {
                drop(st);
                self.changed.notify_all();
                if got != tag {
                    return Err(EngineError::Buffer(format!("mailbox expected tag {tag}, got {got}")));
                }
                return Ok(value);
            }
            st = self.changed.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub fn abort(&self) {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).1 = true;
        self.changed.notify_all();
    }
}
