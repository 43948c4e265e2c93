//! Real-socket transport: one long-lived TCP connection per directed node
//! pair, established from the static cluster manifest at startup.
//!
//! Each node runs the same state machine as the simulation, driven by an
//! event loop over an mpsc channel fed by per-connection reader threads.
//! Outgoing frames go through a per-destination sender thread that applies
//! the link shape (priority ordering plus pacing sleeps) before writing; the
//! default shape writes straight through.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::comm::wire::{self, UpdateMessage};
use crate::comm::{direction_of, LinkShape, NodeId, PriorityPolicy, TrafficLedger};
use crate::config::Manifest;
use crate::error::{Error, Result};
use crate::node::{NodeEvent, NodeIo, TimerToken};
use crate::scalar::Scalar;
use crate::sim::ClusterNode;

const HELLO_MAGIC: [u8; 2] = *b"LC";
const DIAL_TIMEOUT: Duration = Duration::from_secs(30);
const IDLE_TIMEOUT: Duration = Duration::from_secs(60);

enum RtEvent<S: Scalar> {
    Frame {
        src: NodeId,
        msg: UpdateMessage<S>,
        arrived: u64,
    },
    Timer(TimerToken),
    Fatal(Error),
}

struct QueuedFrame {
    layer: u16,
    seq: u64,
    bytes: Vec<u8>,
}

struct LinkState {
    queue: Vec<QueuedFrame>,
    next_seq: u64,
    closed: bool,
}

/// Outgoing side of one directed connection; a dedicated thread drains the
/// queue in priority order and paces writes per the link shape.
struct LinkSender {
    state: Arc<(Mutex<LinkState>, Condvar)>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl LinkSender {
    fn spawn(mut stream: TcpStream, shape: LinkShape, winding_down: Arc<AtomicBool>) -> Self {
        let state = Arc::new((
            Mutex::new(LinkState {
                queue: Vec::new(),
                next_seq: 0,
                closed: false,
            }),
            Condvar::new(),
        ));
        let shared = Arc::clone(&state);
        let handle = std::thread::spawn(move || {
            let (lock, cv) = &*shared;
            loop {
                let frame = {
                    let mut st = lock.lock().unwrap();
                    loop {
                        if let Some(f) = pop_best(&mut st.queue, shape.priority) {
                            break Some(f);
                        }
                        if st.closed {
                            break None;
                        }
                        st = cv.wait(st).unwrap();
                    }
                };
                let Some(frame) = frame else { break };
                let pace = shape.transmit_ns(frame.bytes.len()) + shape.latency_ns();
                if pace > 0 {
                    std::thread::sleep(Duration::from_nanos(pace));
                }
                if let Err(e) = stream.write_all(&frame.bytes) {
                    // During shutdown a peer that has finished may already
                    // have dropped its socket; anything it still needed was
                    // written before it declared itself done.
                    if !winding_down.load(Ordering::Relaxed) {
                        eprintln!("link write failed: {e}");
                    }
                    break;
                }
            }
            let _ = stream.flush();
        });
        LinkSender {
            state,
            handle: Some(handle),
        }
    }

    fn enqueue(&self, layer: u16, bytes: Vec<u8>) {
        let (lock, cv) = &*self.state;
        let mut st = lock.lock().unwrap();
        let seq = st.next_seq;
        st.next_seq += 1;
        st.queue.push(QueuedFrame { layer, seq, bytes });
        cv.notify_one();
    }

    fn close(&mut self) {
        let (lock, cv) = &*self.state;
        lock.lock().unwrap().closed = true;
        cv.notify_all();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn pop_best(queue: &mut Vec<QueuedFrame>, priority: PriorityPolicy) -> Option<QueuedFrame> {
    if queue.is_empty() {
        return None;
    }
    let idx = match priority {
        PriorityPolicy::Fifo => queue
            .iter()
            .enumerate()
            .min_by_key(|(_, q)| q.seq)
            .map(|(i, _)| i)?,
        PriorityPolicy::UpperLayersFirst => queue
            .iter()
            .enumerate()
            .min_by_key(|(_, q)| (std::cmp::Reverse(q.layer), q.seq))
            .map(|(i, _)| i)?,
    };
    Some(queue.remove(idx))
}

fn spawn_reader<S: Scalar>(
    mut stream: TcpStream,
    src: NodeId,
    tx: Sender<RtEvent<S>>,
    epoch: Instant,
) {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        let mut chunk = [0u8; 64 * 1024];
        loop {
            match stream.read(&mut chunk) {
                Ok(0) => break,
                Ok(n) => {
                    buf.extend_from_slice(&chunk[..n]);
                    loop {
                        match wire::try_decode::<S>(&buf) {
                            Ok(Some((msg, consumed))) => {
                                buf.drain(..consumed);
                                let arrived = epoch.elapsed().as_nanos() as u64;
                                if tx.send(RtEvent::Frame { src, msg, arrived }).is_err() {
                                    return;
                                }
                            }
                            Ok(None) => break,
                            Err(e) => {
                                let _ = tx.send(RtEvent::Fatal(e));
                                return;
                            }
                        }
                    }
                }
                Err(_) => break,
            }
        }
    });
}

struct RealIo<'a, S: Scalar> {
    epoch: Instant,
    self_id: NodeId,
    links: &'a BTreeMap<NodeId, LinkSender>,
    ledger: &'a TrafficLedger,
    self_tx: Sender<RtEvent<S>>,
}

impl<'a, S: Scalar> NodeIo<S> for RealIo<'a, S> {
    fn now(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    fn send(&mut self, dst: NodeId, msg: UpdateMessage<S>) {
        let frame = wire::encode(&msg).expect("nodes construct valid messages");
        self.ledger.record(
            msg.layer,
            direction_of(self.self_id, dst),
            msg.payload_floats(),
            frame.len() as u64,
        );
        self.links
            .get(&dst)
            .expect("link to every destination")
            .enqueue(msg.layer, frame);
    }

    fn schedule(&mut self, delay_ns: u64, token: TimerToken) {
        if delay_ns == 0 {
            let _ = self.self_tx.send(RtEvent::Timer(token));
        } else {
            let tx = self.self_tx.clone();
            std::thread::spawn(move || {
                std::thread::sleep(Duration::from_nanos(delay_ns));
                let _ = tx.send(RtEvent::Timer(token));
            });
        }
    }
}

fn dial(addr: &str) -> Result<TcpStream> {
    let deadline = Instant::now() + DIAL_TIMEOUT;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(Error::Transport(format!("dialing {addr}: {e}")));
                }
                std::thread::sleep(Duration::from_millis(25));
            }
        }
    }
}

/// Destinations a node sends to: the server talks to every worker, a worker
/// talks to the server and every peer.
fn destinations(self_id: NodeId, workers: u16) -> Vec<NodeId> {
    if self_id == 0 {
        (1..=workers).collect()
    } else {
        std::iter::once(0)
            .chain((1..=workers).filter(|&q| q != self_id))
            .collect()
    }
}

/// Runs one node over TCP until it finishes. `listener` must already be
/// bound to this node's manifest address.
pub fn run_role<S: Scalar>(
    mut node: ClusterNode<S>,
    self_id: NodeId,
    workers: u16,
    manifest: &Manifest,
    shape: LinkShape,
    ledger: TrafficLedger,
    listener: TcpListener,
) -> Result<ClusterNode<S>> {
    let epoch = Instant::now();
    let (tx, rx): (Sender<RtEvent<S>>, Receiver<RtEvent<S>>) = mpsc::channel();
    let winding_down = Arc::new(AtomicBool::new(false));

    // Accept one incoming connection per node that sends to us; the
    // topology is symmetric, so that count equals our own destination count.
    let expected_in = destinations(self_id, workers).len() as u16;
    let acceptor_tx = tx.clone();
    let acceptor = std::thread::spawn(move || -> Result<()> {
        for _ in 0..expected_in {
            let (mut stream, _) = listener
                .accept()
                .map_err(|e| Error::Transport(format!("accept: {e}")))?;
            stream.set_nodelay(true).ok();
            let mut hello = [0u8; 4];
            stream
                .read_exact(&mut hello)
                .map_err(|e| Error::Transport(format!("hello: {e}")))?;
            if hello[0..2] != HELLO_MAGIC {
                return Err(Error::protocol("bad hello"));
            }
            let src = u16::from_le_bytes([hello[2], hello[3]]);
            spawn_reader::<S>(stream, src, acceptor_tx.clone(), epoch);
        }
        Ok(())
    });

    // Dial everyone we send to.
    let mut links: BTreeMap<NodeId, LinkSender> = BTreeMap::new();
    for dst in destinations(self_id, workers) {
        let mut stream = dial(manifest.addr_of(dst))?;
        stream.set_nodelay(true).ok();
        let mut hello = Vec::with_capacity(4);
        hello.extend_from_slice(&HELLO_MAGIC);
        hello.extend_from_slice(&self_id.to_le_bytes());
        stream
            .write_all(&hello)
            .map_err(|e| Error::Transport(format!("hello to {dst}: {e}")))?;
        links.insert(
            dst,
            LinkSender::spawn(stream, shape, Arc::clone(&winding_down)),
        );
    }

    acceptor
        .join()
        .map_err(|_| Error::Transport("acceptor panicked".into()))??;

    let mut io = RealIo {
        epoch,
        self_id,
        links: &links,
        ledger: &ledger,
        self_tx: tx.clone(),
    };
    node.handle(NodeEvent::Start, &mut io)?;
    while !node.is_done() {
        let ev = rx
            .recv_timeout(IDLE_TIMEOUT)
            .map_err(|_| Error::Transport(format!("node {self_id} idle timeout")))?;
        match ev {
            RtEvent::Frame { src, msg, arrived } => {
                node.handle(NodeEvent::Frame { src, msg, arrived }, &mut io)?
            }
            RtEvent::Timer(token) => node.handle(NodeEvent::Timer(token), &mut io)?,
            RtEvent::Fatal(e) => return Err(e),
        }
    }

    winding_down.store(true, Ordering::Relaxed);
    for (_, link) in links.iter_mut() {
        link.close();
    }
    Ok(node)
}
