//! Link shaping: a rate budget (token bucket draining at the configured
//! bytes/second, one frame of burst), propagation latency, and a queueing
//! policy that can prioritize upper layers.
//!
//! The link transmits one frame at a time. A frame submitted at time T on an
//! idle link occupies it for `bytes / budget` and arrives `latency` later;
//! while the link is busy, frames queue and the policy picks the next one at
//! each transmission boundary. Timestamps are u64 nanoseconds, so the model
//! works identically on the virtual clock and on a real monotonic clock.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorityPolicy {
    #[default]
    Fifo,
    /// Frames tagged with a higher layer id dequeue first; ties stay FIFO.
    UpperLayersFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkShape {
    /// Bytes per second; 0 means unlimited.
    pub bandwidth: u64,
    /// One-way propagation delay in milliseconds.
    pub latency_ms: f64,
    pub priority: PriorityPolicy,
}

impl Default for LinkShape {
    fn default() -> Self {
        LinkShape {
            bandwidth: 0,
            latency_ms: 0.0,
            priority: PriorityPolicy::Fifo,
        }
    }
}

impl LinkShape {
    pub fn latency_ns(&self) -> u64 {
        (self.latency_ms * 1e6).round() as u64
    }

    /// Time the link is occupied transmitting `bytes`.
    pub fn transmit_ns(&self, bytes: usize) -> u64 {
        if self.bandwidth == 0 {
            0
        } else {
            // ceil(bytes * 1e9 / budget)
            let num = bytes as u128 * 1_000_000_000u128;
            ((num + self.bandwidth as u128 - 1) / self.bandwidth as u128) as u64
        }
    }
}

/// Transmission schedule for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Departure {
    /// When the link finishes serializing the frame (becomes free).
    pub transmit_end: u64,
    /// When the receiver sees the frame.
    pub arrive: u64,
}

#[derive(Debug)]
struct Queued<T> {
    seq: u64,
    layer: u16,
    bytes: usize,
    item: T,
}

/// One directed shaped link carrying opaque frames of type `T`.
#[derive(Debug)]
pub struct ShapedLink<T> {
    shape: LinkShape,
    busy_until: u64,
    next_seq: u64,
    queue: Vec<Queued<T>>,
}

impl<T> ShapedLink<T> {
    pub fn new(shape: LinkShape) -> Self {
        ShapedLink {
            shape,
            busy_until: 0,
            next_seq: 0,
            queue: Vec::new(),
        }
    }

    pub fn shape(&self) -> &LinkShape {
        &self.shape
    }

    /// When the in-flight transmission ends, if the link is busy.
    pub fn busy_until(&self) -> u64 {
        self.busy_until
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Offers a frame at time `now`. If the link is idle the frame starts
    /// transmitting immediately and its schedule is returned; otherwise it
    /// queues and a later [`ShapedLink::on_ready`] will release it.
    pub fn submit(
        &mut self,
        now: u64,
        layer: u16,
        bytes: usize,
        item: T,
    ) -> Option<(T, Departure)> {
        let q = Queued {
            seq: self.next_seq,
            layer,
            bytes,
            item,
        };
        self.next_seq += 1;
        if self.busy_until <= now && self.queue.is_empty() {
            Some(self.start(now, q))
        } else {
            self.queue.push(q);
            None
        }
    }

    /// Called at a transmission boundary (time == previous `transmit_end`):
    /// starts the best queued frame, if any.
    pub fn on_ready(&mut self, now: u64) -> Option<(T, Departure)> {
        if self.queue.is_empty() || self.busy_until > now {
            return None;
        }
        let best = match self.shape.priority {
            PriorityPolicy::Fifo => self
                .queue
                .iter()
                .enumerate()
                .min_by_key(|(_, q)| q.seq)
                .map(|(i, _)| i)?,
            PriorityPolicy::UpperLayersFirst => self
                .queue
                .iter()
                .enumerate()
                .min_by_key(|(_, q)| (std::cmp::Reverse(q.layer), q.seq))
                .map(|(i, _)| i)?,
        };
        let q = self.queue.remove(best);
        Some(self.start(now, q))
    }

    fn start(&mut self, now: u64, q: Queued<T>) -> (T, Departure) {
        let begin = now.max(self.busy_until);
        let end = begin + self.shape.transmit_ns(q.bytes);
        self.busy_until = end;
        (
            q.item,
            Departure {
                transmit_end: end,
                arrive: end + self.shape.latency_ns(),
            },
        )
    }
}
