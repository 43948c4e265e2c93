//! Per-layer, per-direction traffic tallies, recorded at send time by every
//! transport. Floats count data scalars only (gradients, parameters, factor
//! entries); bytes count whole frames.

use serde::Serialize;
use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    WorkerToServer,
    ServerToWorker,
    PeerToPeer,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub floats: u64,
    pub bytes: u64,
    pub messages: u64,
}

/// Monotonic counters keyed by (layer, direction); snapshot at any time.
#[derive(Debug, Default, Clone)]
pub struct TrafficLedger {
    inner: Arc<Mutex<BTreeMap<(u16, Direction), Tally>>>,
}

impl TrafficLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, layer: u16, direction: Direction, floats: u64, bytes: u64) {
        let mut map = self.inner.lock().unwrap();
        let t = map.entry((layer, direction)).or_default();
        t.floats += floats;
        t.bytes += bytes;
        t.messages += 1;
    }

    pub fn snapshot(&self) -> BTreeMap<(u16, Direction), Tally> {
        self.inner.lock().unwrap().clone()
    }

    pub fn tally(&self, layer: u16, direction: Direction) -> Tally {
        self.inner
            .lock()
            .unwrap()
            .get(&(layer, direction))
            .copied()
            .unwrap_or_default()
    }

    /// Total floats for one layer across all directions.
    pub fn layer_floats(&self, layer: u16) -> u64 {
        self.inner
            .lock()
            .unwrap()
            .iter()
            .filter(|((l, _), _)| *l == layer)
            .map(|(_, t)| t.floats)
            .sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.inner.lock().unwrap().values().map(|t| t.bytes).sum()
    }
}
