//! Deterministic in-process cluster simulation.
//!
//! A single-threaded discrete-event loop drives every node. Events order by
//! (virtual time, submission sequence), so identical configurations replay
//! identical runs, timestamps included. Frames are fully encoded onto shaped
//! links and decoded on delivery, exactly as the TCP transport would.

use std::collections::{BinaryHeap, BTreeMap};
use std::marker::PhantomData;

use crate::comm::wire::{self, UpdateMessage};
use crate::comm::{direction_of, LinkShape, NodeId, ShapedLink, TrafficLedger};
use crate::error::{Error, Result};
use crate::node::{Node, NodeEvent, NodeIo, TimerToken};
use crate::scalar::Scalar;
use crate::server::ServerNode;
use crate::worker::WorkerNode;

#[derive(Debug)]
enum SimEvent {
    Start(NodeId),
    Deliver {
        src: NodeId,
        dst: NodeId,
        frame: Vec<u8>,
    },
    Timer {
        node: NodeId,
        token: TimerToken,
    },
    LinkReady {
        src: NodeId,
        dst: NodeId,
    },
}

struct HeapEntry {
    time: u64,
    seq: u64,
    event: SimEvent,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap by (time, seq) on top of std's max-heap.
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Shared event queue, shaped links, and traffic accounting.
pub struct SimCore<S: Scalar> {
    time: u64,
    seq: u64,
    heap: BinaryHeap<HeapEntry>,
    links: BTreeMap<(NodeId, NodeId), ShapedLink<Vec<u8>>>,
    shape: LinkShape,
    ledger: TrafficLedger,
    current: NodeId,
    _scalar: PhantomData<S>,
}

impl<S: Scalar> SimCore<S> {
    fn push(&mut self, time: u64, event: SimEvent) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(HeapEntry { time, seq, event });
    }

    fn link(&mut self, src: NodeId, dst: NodeId) -> &mut ShapedLink<Vec<u8>> {
        let shape = self.shape;
        self.links
            .entry((src, dst))
            .or_insert_with(|| ShapedLink::new(shape))
    }
}

impl<S: Scalar> NodeIo<S> for SimCore<S> {
    fn now(&self) -> u64 {
        self.time
    }

    fn send(&mut self, dst: NodeId, msg: UpdateMessage<S>) {
        let src = self.current;
        debug_assert_ne!(src, dst, "node sending to itself");
        let frame = wire::encode(&msg).expect("nodes construct valid messages");
        self.ledger.record(
            msg.layer,
            direction_of(src, dst),
            msg.payload_floats(),
            frame.len() as u64,
        );
        let now = self.time;
        let layer = msg.layer;
        let nbytes = frame.len();
        if let Some((frame, dep)) = self.link(src, dst).submit(now, layer, nbytes, frame) {
            self.push(dep.arrive, SimEvent::Deliver { src, dst, frame });
            self.push(dep.transmit_end, SimEvent::LinkReady { src, dst });
        }
    }

    fn schedule(&mut self, delay_ns: u64, token: TimerToken) {
        let node = self.current;
        let at = self.time + delay_ns;
        self.push(at, SimEvent::Timer { node, token });
    }
}

/// Server or worker, by node id (the server is node 0).
pub enum ClusterNode<S: Scalar> {
    Server(ServerNode<S>),
    Worker(WorkerNode<S>),
}

impl<S: Scalar> ClusterNode<S> {
    pub fn handle(&mut self, ev: NodeEvent<S>, io: &mut dyn NodeIo<S>) -> Result<()> {
        match self {
            ClusterNode::Server(n) => n.handle(ev, io),
            ClusterNode::Worker(n) => n.handle(ev, io),
        }
    }

    pub fn is_done(&self) -> bool {
        match self {
            ClusterNode::Server(n) => n.is_done(),
            ClusterNode::Worker(n) => n.is_done(),
        }
    }

    pub fn as_worker(&self) -> Option<&WorkerNode<S>> {
        match self {
            ClusterNode::Worker(w) => Some(w),
            _ => None,
        }
    }

    pub fn as_server(&self) -> Option<&ServerNode<S>> {
        match self {
            ClusterNode::Server(s) => Some(s),
            _ => None,
        }
    }
}

pub struct Simulation<S: Scalar> {
    core: SimCore<S>,
    nodes: Vec<ClusterNode<S>>,
}

impl<S: Scalar> Simulation<S> {
    pub fn new(shape: LinkShape, ledger: TrafficLedger) -> Self {
        Simulation {
            core: SimCore {
                time: 0,
                seq: 0,
                heap: BinaryHeap::new(),
                links: BTreeMap::new(),
                shape,
                ledger,
                current: 0,
                _scalar: PhantomData,
            },
            nodes: Vec::new(),
        }
    }

    /// Nodes must be added in id order: server first, then workers 1..=P.
    pub fn add_node(&mut self, node: ClusterNode<S>) -> NodeId {
        self.nodes.push(node);
        (self.nodes.len() - 1) as NodeId
    }

    pub fn now(&self) -> u64 {
        self.core.time
    }

    pub fn ledger(&self) -> &TrafficLedger {
        &self.core.ledger
    }

    pub fn node(&self, id: NodeId) -> &ClusterNode<S> {
        &self.nodes[id as usize]
    }

    pub fn nodes(&self) -> &[ClusterNode<S>] {
        &self.nodes
    }

    pub fn into_nodes(self) -> Vec<ClusterNode<S>> {
        self.nodes
    }

    fn dispatch(&mut self, node: NodeId, ev: NodeEvent<S>) -> Result<()> {
        self.core.current = node;
        self.nodes[node as usize].handle(ev, &mut self.core)
    }

    /// Runs to quiescence. Errors if the event budget is exhausted or if any
    /// node is still waiting when the queue drains (a liveness failure).
    pub fn run(&mut self, max_events: u64) -> Result<()> {
        for id in 0..self.nodes.len() as NodeId {
            self.core.push(0, SimEvent::Start(id));
        }
        let mut processed = 0u64;
        while let Some(entry) = self.core.heap.pop() {
            processed += 1;
            if processed > max_events {
                return Err(Error::Transport(format!(
                    "event budget {max_events} exhausted at t={}ns",
                    self.core.time
                )));
            }
            debug_assert!(entry.time >= self.core.time, "time went backwards");
            self.core.time = entry.time;
            match entry.event {
                SimEvent::Start(node) => self.dispatch(node, NodeEvent::Start)?,
                SimEvent::Timer { node, token } => {
                    self.dispatch(node, NodeEvent::Timer(token))?
                }
                SimEvent::Deliver { src, dst, frame } => {
                    let msg = wire::decode::<S>(&frame)?;
                    let arrived = self.core.time;
                    self.dispatch(dst, NodeEvent::Frame { src, msg, arrived })?;
                }
                SimEvent::LinkReady { src, dst } => {
                    let now = self.core.time;
                    if let Some((frame, dep)) = self.core.link(src, dst).on_ready(now) {
                        self.core.push(dep.arrive, SimEvent::Deliver { src, dst, frame });
                        self.core.push(dep.transmit_end, SimEvent::LinkReady { src, dst });
                    }
                }
            }
        }
        let stuck: Vec<usize> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| !n.is_done())
            .map(|(i, _)| i)
            .collect();
        if !stuck.is_empty() {
            return Err(Error::Transport(format!(
                "cluster quiesced with unfinished nodes {stuck:?} at t={}ns",
                self.core.time
            )));
        }
        Ok(())
    }
}
