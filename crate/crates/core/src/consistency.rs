//! Bounded-staleness consistency: per-worker committed clocks and read
//! gating. A reader at iteration t is granted once every worker has committed
//! iteration t-s-1, so the state it observes incorporates all updates at
//! least that old. s = 0 degenerates to lock-step execution.
//!
//! A worker's clock commits only when its pushes for every tracked layer of
//! that iteration have been recorded; overlapped backpropagation pushes
//! layers early, but the clock commit is the final act of the iteration.

use crate::error::{Error, Result};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

/// Outcome of a read request under the staleness bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadGrant {
    pub worker: u16,
    pub iteration: u32,
    pub granted: bool,
    /// All updates through this committed clock are visible to the reader;
    /// clock 0 is the initial state.
    pub guaranteed_through: i64,
}

/// Per-worker committed clocks plus the per-layer push ledger that gates
/// clock advances. Workers are 1-based; clock 0 means nothing committed.
#[derive(Debug, Clone)]
pub struct ClockTable {
    clocks: Vec<u32>,
    staleness: u32,
    /// Layer ids whose pushes gate a clock advance.
    tracked_layers: Vec<u16>,
    /// last_push[worker-1][tracked-layer index] = highest pushed clock.
    last_push: Vec<Vec<u32>>,
}

impl ClockTable {
    pub fn new(workers: u16, staleness: u32, tracked_layers: Vec<u16>) -> Self {
        assert!(workers >= 1, "need at least one worker");
        ClockTable {
            clocks: vec![0; workers as usize],
            staleness,
            last_push: vec![vec![0; tracked_layers.len()]; workers as usize],
            tracked_layers,
        }
    }

    pub fn workers(&self) -> u16 {
        self.clocks.len() as u16
    }

    pub fn staleness(&self) -> u32 {
        self.staleness
    }

    pub fn clock_of(&self, worker: u16) -> u32 {
        self.clocks[(worker - 1) as usize]
    }

    pub fn min_clock(&self) -> u32 {
        *self.clocks.iter().min().expect("at least one worker")
    }

    /// Records that `worker` pushed its update for `layer` at `clock`.
    /// Pushes must arrive in non-decreasing clock order per (worker, layer).
    pub fn record_push(&mut self, worker: u16, layer: u16, clock: u32) -> Result<()> {
        let w = (worker - 1) as usize;
        let idx = self
            .tracked_layers
            .iter()
            .position(|&l| l == layer)
            .ok_or_else(|| Error::protocol(format!("layer {layer} not tracked")))?;
        if clock < self.last_push[w][idx] {
            return Err(Error::protocol(format!(
                "push clock went backwards for worker {worker} layer {layer}"
            )));
        }
        self.last_push[w][idx] = clock;
        Ok(())
    }

    /// Commits the next iteration for `worker`. Errors unless every tracked
    /// layer's push for that iteration has been recorded.
    pub fn advance(&mut self, worker: u16) -> Result<u32> {
        let w = (worker - 1) as usize;
        let next = self.clocks[w] + 1;
        for (idx, &layer) in self.tracked_layers.iter().enumerate() {
            if self.last_push[w][idx] < next {
                return Err(Error::protocol(format!(
                    "worker {worker} advancing to clock {next} before pushing layer {layer}"
                )));
            }
        }
        self.clocks[w] = next;
        Ok(next)
    }

    /// Non-blocking staleness check for `worker` reading at iteration `t`:
    /// granted iff min_clock >= t - s - 1.
    pub fn try_read(&self, worker: u16, iteration: u32) -> ReadGrant {
        let min = self.min_clock() as i64;
        let needed = iteration as i64 - self.staleness as i64 - 1;
        ReadGrant {
            worker,
            iteration,
            granted: min >= needed,
            guaranteed_through: min,
        }
    }
}

/// Shared-service form of the clock table: readers block until their grant
/// and are woken by any clock advance.
pub struct ConsistencyManager {
    inner: Mutex<ClockTable>,
    advanced: Condvar,
}

impl ConsistencyManager {
    pub fn new(workers: u16, staleness: u32, tracked_layers: Vec<u16>) -> Self {
        ConsistencyManager {
            inner: Mutex::new(ClockTable::new(workers, staleness, tracked_layers)),
            advanced: Condvar::new(),
        }
    }

    pub fn record_push(&self, worker: u16, layer: u16, clock: u32) -> Result<()> {
        self.inner.lock().unwrap().record_push(worker, layer, clock)
    }

    pub fn advance(&self, worker: u16) -> Result<u32> {
        let clock = self.inner.lock().unwrap().advance(worker)?;
        self.advanced.notify_all();
        Ok(clock)
    }

    pub fn try_read(&self, worker: u16, iteration: u32) -> ReadGrant {
        self.inner.lock().unwrap().try_read(worker, iteration)
    }

    pub fn min_clock(&self) -> u32 {
        self.inner.lock().unwrap().min_clock()
    }

    /// Blocks until the read is granted or `timeout` elapses.
    pub fn wait_read(&self, worker: u16, iteration: u32, timeout: Duration) -> Result<ReadGrant> {
        let mut table = self.inner.lock().unwrap();
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let grant = table.try_read(worker, iteration);
            if grant.granted {
                return Ok(grant);
            }
            let now = std::time::Instant::now();
            if now >= deadline {
                return Err(Error::Transport(format!(
                    "read for worker {worker} at iteration {iteration} timed out"
                )));
            }
            let (t, res) = self.advanced.wait_timeout(table, deadline - now).unwrap();
            table = t;
            if res.timed_out() {
                let grant = table.try_read(worker, iteration);
                if grant.granted {
                    return Ok(grant);
                }
                return Err(Error::Transport(format!(
                    "read for worker {worker} at iteration {iteration} timed out"
                )));
            }
        }
    }
}
