//! Discrete-event core: integer-nanosecond clock, a deterministic event
//! queue, and the trace sink shared by all protocol modules.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

/// Simulated time in nanoseconds. Microseconds are the human-facing unit;
/// nanoseconds internally avoid float drift across long runs.
pub type TimeNs = u64;

pub const NS_PER_US: u64 = 1_000;
pub const NS_PER_MS: u64 = 1_000_000;

/// Convert a fractional microsecond cost into integer nanoseconds.
pub fn us_to_ns(us: f64) -> TimeNs {
    debug_assert!(us >= 0.0 && us.is_finite());
    (us * NS_PER_US as f64).round() as TimeNs
}

pub fn ns_to_us(ns: TimeNs) -> f64 {
    ns as f64 / NS_PER_US as f64
}

pub fn ns_to_ms(ns: TimeNs) -> f64 {
    ns as f64 / NS_PER_MS as f64
}

struct Scheduled<E> {
    time: TimeNs,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl<E> Eq for Scheduled<E> {}
impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Scheduled<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert for earliest-first. Seq breaks
        // timestamp ties so pop order is independent of heap internals.
        other
            .time
            .cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

/// Deterministic min-heap of timestamped events. Events scheduled at the
/// same instant pop in scheduling order.
pub struct EventQueue<E> {
    heap: BinaryHeap<Scheduled<E>>,
    seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            seq: 0,
        }
    }

    pub fn push(&mut self, time: TimeNs, event: E) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Scheduled { time, seq, event });
    }

    pub fn pop(&mut self) -> Option<(TimeNs, E)> {
        self.heap.pop().map(|s| (s.time, s.event))
    }

    pub fn peek_time(&self) -> Option<TimeNs> {
        self.heap.peek().map(|s| s.time)
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }
}

/// One row of the exported event trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub time_ns: TimeNs,
    pub node: u32,
    pub op: String,
    pub peer: Option<u32>,
    pub size: u64,
    pub detail: String,
}

/// Append-only trace shared by fabric, protocol, and pipeline actors.
///
/// Rows are recorded in emission order, which for planner-produced protocol
/// timelines is already causal order. `sorted_rows` re-sorts by timestamp
/// (stable) for consumers that interleave independent planners.
#[derive(Debug, Default)]
pub struct Trace {
    rows: Vec<TraceRow>,
    enabled: bool,
}

impl Trace {
    pub fn new() -> Self {
        Self {
            rows: Vec::new(),
            enabled: true,
        }
    }

    /// A trace that drops rows; used by bulk fuzz runs where only
    /// completions matter.
    pub fn disabled() -> Self {
        Self {
            rows: Vec::new(),
            enabled: false,
        }
    }

    pub fn record(
        &mut self,
        time_ns: TimeNs,
        node: u32,
        op: &str,
        peer: Option<u32>,
        size: u64,
        detail: impl Into<String>,
    ) {
        if self.enabled {
            self.rows.push(TraceRow {
                time_ns,
                node,
                op: op.to_string(),
                peer,
                size,
                detail: detail.into(),
            });
        }
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn sorted_rows(&self) -> Vec<&TraceRow> {
        let mut v: Vec<&TraceRow> = self.rows.iter().collect();
        v.sort_by_key(|r| r.time_ns);
        v
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }

    /// Export as CSV with columns `time_ns,node,op,peer,size,detail`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "time_ns,node,op,peer,size,detail")?;
        for r in self.sorted_rows() {
            let peer = r.peer.map(|p| p.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.time_ns, r.node, r.op, peer, r.size, r.detail
            )?;
        }
        Ok(())
    }
}
