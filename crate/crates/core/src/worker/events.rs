//! Append-only per-worker event log and the per-iteration report stream.

use serde::Serialize;

use crate::sufficient_factor::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    ForwardStart,
    ForwardEnd,
    BackwardStart,
    BackwardEnd,
    CommStart,
    CommEnd,
    ClockCommit,
    /// A staleness-gated read was granted; `min_stamp` is the smallest
    /// per-worker version stamp observed for the layer at grant time.
    GrantObserved { min_stamp: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRecord {
    pub worker: u16,
    pub iter: u32,
    /// 0 for iteration-level events.
    pub layer: u16,
    pub time_ns: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Totally ordered by the runtime clock (events are appended as they occur).
#[derive(Debug, Default, Clone)]
pub struct EventLog {
    records: Vec<LogRecord>,
}

impl EventLog {
    pub fn push(&mut self, rec: LogRecord) {
        self.records.push(rec);
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    /// Timestamp of the matching record, if logged.
    pub fn time_of(&self, iter: u32, layer: u16, kind: EventKind) -> Option<u64> {
        self.records
            .iter()
            .find(|r| r.iter == iter && r.layer == layer && r.kind == kind)
            .map(|r| r.time_ns)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Per-layer communication outcome inside one iteration's report.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LayerCommReport {
    pub layer: u16,
    pub strategy: Strategy,
    pub comm_start_ns: u64,
    /// None when the task completes in a later iteration.
    pub comm_end_ns: Option<u64>,
    pub floats_sent: u64,
}

/// What one worker iteration produced, emitted at clock commit.
#[derive(Debug, Clone, Serialize)]
pub struct IterationReport {
    pub worker: u16,
    pub iter: u32,
    pub loss: f64,
    pub started_ns: u64,
    pub committed_ns: u64,
    pub floats_sent: u64,
    pub floats_received: u64,
    /// Received data floats attributed to the layer they carry, keyed by
    /// layer id (arrival during this iteration's window).
    pub floats_received_by_layer: std::collections::BTreeMap<u16, u64>,
    /// Max over this iteration's granted reads of (t - 1 - min_stamp).
    pub observed_staleness: u32,
    pub comm: Vec<LayerCommReport>,
}
