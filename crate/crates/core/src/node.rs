//! Event-driven node interface shared by the in-process simulation and the
//! TCP runtime. Nodes are state machines: they receive frames and timer
//! completions, mutate local state, and emit sends/timers through [`NodeIo`].

use crate::comm::wire::UpdateMessage;
use crate::comm::NodeId;
use crate::error::Result;
use crate::scalar::Scalar;

/// Opaque completion token for a scheduled compute interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerToken {
    ForwardDone(u16),
    BackwardDone(u16),
}

#[derive(Debug)]
pub enum NodeEvent<S: Scalar> {
    /// Delivered once per node before any other event.
    Start,
    /// A decoded frame arriving from `src` at local time `arrived`.
    Frame {
        src: NodeId,
        msg: UpdateMessage<S>,
        arrived: u64,
    },
    Timer(TimerToken),
}

/// Side effects a node may request while handling an event.
pub trait NodeIo<S: Scalar> {
    /// Nanoseconds on this runtime's clock (virtual or monotonic).
    fn now(&self) -> u64;
    /// Encodes and ships a message; delivery obeys the link's shape.
    fn send(&mut self, dst: NodeId, msg: UpdateMessage<S>);
    /// Requests a Timer event for this node after `delay_ns`.
    fn schedule(&mut self, delay_ns: u64, token: TimerToken);
}

pub trait Node<S: Scalar> {
    fn handle(&mut self, ev: NodeEvent<S>, io: &mut dyn NodeIo<S>) -> Result<()>;
    /// True once the node has no more work of its own (it may still receive
    /// frames from peers that finish later).
    fn is_done(&self) -> bool;
}
