//! Per-thread timing events and the CSV they are written as.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Update,
    Forward,
    Backward,
    Compress,
    Allreduce,
    Decompress,
    Barrier,
    Idle,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Update,
        Stage::Forward,
        Stage::Backward,
        Stage::Compress,
        Stage::Allreduce,
        Stage::Decompress,
        Stage::Barrier,
        Stage::Idle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Update => "update",
            Stage::Forward => "forward",
            Stage::Backward => "backward",
            Stage::Compress => "compress",
            Stage::Allreduce => "allreduce",
            Stage::Decompress => "decompress",
            Stage::Barrier => "barrier",
            Stage::Idle => "idle",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// Which thread of a worker recorded an event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Lane {
    Compute,
    Comm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEvent {
    pub rank: usize,
    pub lane: Lane,
    pub iteration: u64,
    pub stage: Stage,
    pub start_ns: u64,
    pub end_ns: u64,
    /// Set on update events only.
    pub consumed_tag: Option<i64>,
    /// Update consumed a zero-initialized slot.
    pub zero_slot: bool,
}

impl TraceEvent {
    pub fn duration_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }
}

pub const CSV_HEADER: &str = "rank,iteration,stage,start_ns,end_ns,consumed_tag";

pub fn write_csv<W: Write>(events: &[TraceEvent], mut out: W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for e in events {
        let tag = e.consumed_tag.map(|t| t.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{},{}", e.rank, e.iteration, e.stage, e.start_ns, e.end_ns, tag)?;
    }
    Ok(())
}

/// Records spans for one thread relative to a shared origin.
#[derive(Debug)]
pub(crate) struct Recorder {
    rank: usize,
    lane: Lane,
    origin: Instant,
    pub(crate) events: Vec<TraceEvent>,
}

impl Recorder {
    pub(crate) fn new(rank: usize, lane: Lane, origin: Instant) -> Self {
        Recorder { rank, lane, origin, events: Vec::new() }
    }

    pub(crate) fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }

    pub(crate) fn span<R>(&mut self, stage: Stage, iteration: u64, f: impl FnOnce() -> R) -> R {
        let start = self.now_ns();
        let out = f();
        self.push(stage, iteration, start, None, false);
        out
    }

    pub(crate) fn push(&mut self, stage: Stage, iteration: u64, start_ns: u64, consumed_tag: Option<i64>, zero_slot: bool) {
        // Clamp so events on one thread never overlap even with a coarse clock.
        let start_ns = self.events.last().map_or(start_ns, |e| start_ns.max(e.end_ns));
        let end_ns = self.now_ns().max(start_ns);
        self.events.push(TraceEvent {
            rank: self.rank,
            lane: self.lane,
            iteration,
            stage,
            start_ns,
            end_ns,
            consumed_tag,
            zero_slot,
        });
    }
}

/// Sort by start time, then rank.
pub fn sort_events(events: &mut [TraceEvent]) {
    events.sort_by_key(|e| (e.start_ns, e.rank, e.end_ns));
}

/// Total time spent in `stage` by `rank` (all lanes).
pub fn stage_total_ns(events: &[TraceEvent], rank: usize, stage: Stage) -> u64 {
    events.iter().filter(|e| e.rank == rank && e.stage == stage).map(TraceEvent::duration_ns).sum()
}
