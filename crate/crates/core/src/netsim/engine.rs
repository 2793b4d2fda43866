//! Discrete-event queue and the event log.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use super::NetError;

struct Entry<E> {
    time_ms: u64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.time_ms, self.seq) == (other.time_ms, other.seq)
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // Reversed: BinaryHeap is a max-heap, we pop the earliest.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time_ms, other.seq).cmp(&(self.time_ms, self.seq))
    }
}

/// Events ordered by time, then by insertion order.
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    now_ms: u64,
    seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            now_ms: 0,
            seq: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, time_ms: u64, event: E) -> Result<(), NetError> {
        if time_ms < self.now_ms {
            return Err(NetError::TimeReversal {
                now_ms: self.now_ms,
                at_ms: time_ms,
            });
        }
        self.seq += 1;
        self.heap.push(Entry {
            time_ms,
            seq: self.seq,
            event,
        });
        Ok(())
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.heap.peek().map(|e| e.time_ms)
    }

    /// Pops the next event if it is due at or before `limit_ms`.
    pub fn pop_until(&mut self, limit_ms: u64) -> Option<(u64, E)> {
        if self.peek_time()? > limit_ms {
            return None;
        }
        let e = self.heap.pop()?;
        self.now_ms = e.time_ms;
        Some((e.time_ms, e.event))
    }

    /// Moves the clock forward without an event.
    pub fn advance_to(&mut self, time_ms: u64) {
        self.now_ms = self.now_ms.max(time_ms);
    }
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub time_ms: u64,
    pub kind: &'static str,
    pub src: String,
    pub dst: String,
    pub detail: String,
}

impl LogRecord {
    pub fn new(time_ms: u64, kind: &'static str, src: impl ToString, dst: impl ToString, detail: impl Into<String>) -> Self {
        LogRecord {
            time_ms,
            kind,
            src: src.to_string(),
            dst: dst.to_string(),
            detail: detail.into(),
        }
    }
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}\t{}", self.time_ms, self.kind, self.src, self.dst, self.detail)
    }
}

/// Tab-separated event log: `time_ms kind src dst detail`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    header: Vec<String>,
    records: Vec<LogRecord>,
}

impl EventLog {
    pub fn push(&mut self, record: LogRecord) {
        self.records.push(record);
    }

    /// Adds a `# ` comment line printed before the records.
    pub fn comment(&mut self, line: impl Into<String>) {
        self.header.push(line.into());
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a LogRecord> + 'a {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for h in &self.header {
            out.push_str("# ");
            out.push_str(h);
            out.push('\n');
        }
        for r in &self.records {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }
}
