//! Wire protocol, link shaping, and traffic accounting shared by the
//! in-process simulated transport and the TCP transport.

pub mod counter;
pub mod shaper;
pub mod wire;

pub use counter::{Direction, Tally, TrafficLedger};
pub use shaper::{Departure, LinkShape, PriorityPolicy, ShapedLink};
pub use wire::{encode, try_decode, AckCode, MsgKind, Payload, UpdateMessage};

/// Node addressing: 0 is the server, workers are 1..=P.
pub type NodeId = u16;

pub const SERVER_NODE: NodeId = 0;

/// Classifies a directed link for the traffic ledger.
pub fn direction_of(src: NodeId, dst: NodeId) -> Direction {
    match (src, dst) {
        (SERVER_NODE, _) => Direction::ServerToWorker,
        (_, SERVER_NODE) => Direction::WorkerToServer,
        _ => Direction::PeerToPeer,
    }
}
