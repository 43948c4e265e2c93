//! The master-node parameter shard: collects per-layer updates (full
//! matrices or factor sets), aggregates them per (layer, clock), applies the
//! solver step exactly once per clock, and serves parameter pulls under the
//! staleness bound.
//!
//! Pulls that cannot be granted yet are parked and retried on every clock
//! advance, so a reader blocked on a straggler wakes as soon as the straggler
//! commits.

use crate::aggregate::{AddOutcome, UpdateAggregator};
use crate::comm::wire::{AckCode, MsgKind, Payload, UpdateMessage};
use crate::comm::NodeId;
use crate::consistency::ClockTable;
use crate::error::{Error, Result};
use crate::network::{ModelSpec, ModelState};
use crate::node::{Node, NodeEvent, NodeIo};
use crate::scalar::Scalar;
use crate::solver::{self, SolverConfig};
use crate::sufficient_factor::reconstruct_tensor;

#[derive(Debug, Clone, Copy)]
struct ParkedPull {
    worker: u16,
    layer: u16,
    read_iter: u32,
}

/// Server-side state: the global model, solver buffers, the consistency
/// manager over server-routed layers, and the per-(layer, clock) aggregator.
pub struct ServerNode<S: Scalar> {
    spec: ModelSpec,
    solver_cfg: SolverConfig,
    model: ModelState<S>,
    velocity: ModelState<S>,
    clocks: ClockTable,
    agg: UpdateAggregator<S>,
    parked: Vec<ParkedPull>,
    total_iters: u32,
    /// Counts solver applications per layer, for the momentum-once invariant.
    apply_counts: std::collections::BTreeMap<u16, u32>,
}

impl<S: Scalar> ServerNode<S> {
    /// `tracked_layers`: parameterized layers routed through the server
    /// (everything except broadcast layers).
    pub fn new(
        spec: ModelSpec,
        solver_cfg: SolverConfig,
        init_seed: u64,
        workers: u16,
        staleness: u32,
        tracked_layers: Vec<u16>,
        total_iters: u32,
    ) -> Result<Self> {
        Self::build(
            spec, solver_cfg, init_seed, workers, staleness, tracked_layers, total_iters, None,
        )
    }

    /// Resumes from a snapshot taken at an iteration boundary: parameters and
    /// momentum come from the file, and every worker's clock is replayed to
    /// the completed iteration.
    pub fn restored(
        spec: ModelSpec,
        solver_cfg: SolverConfig,
        workers: u16,
        staleness: u32,
        tracked_layers: Vec<u16>,
        total_iters: u32,
        snapshot: crate::worker::checkpoint::WorkerSnapshot<S>,
    ) -> Result<Self> {
        Self::build(
            spec,
            solver_cfg,
            0,
            workers,
            staleness,
            tracked_layers,
            total_iters,
            Some(snapshot),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        spec: ModelSpec,
        solver_cfg: SolverConfig,
        init_seed: u64,
        workers: u16,
        staleness: u32,
        tracked_layers: Vec<u16>,
        total_iters: u32,
        restore: Option<crate::worker::checkpoint::WorkerSnapshot<S>>,
    ) -> Result<Self> {
        let (model, velocity, completed) = match restore {
            Some(snap) => (snap.model, snap.velocity, snap.next_iter - 1),
            None => {
                let model = crate::network::init_params::<S>(&spec, init_seed)?;
                let velocity = model.zeros_like();
                (model, velocity, 0)
            }
        };
        let mut clocks = ClockTable::new(workers, staleness, tracked_layers.clone());
        if completed > 0 {
            for w in 1..=workers {
                for &l in &tracked_layers {
                    clocks.record_push(w, l, completed)?;
                }
                for _ in 0..completed {
                    clocks.advance(w)?;
                }
            }
        }
        Ok(ServerNode {
            spec,
            solver_cfg,
            model,
            velocity,
            clocks,
            agg: UpdateAggregator::resume(&tracked_layers, workers, completed),
            parked: Vec::new(),
            total_iters,
            apply_counts: Default::default(),
        })
    }

    pub fn snapshot(&self, next_iter: u32) -> crate::worker::checkpoint::WorkerSnapshot<S> {
        crate::worker::checkpoint::WorkerSnapshot {
            next_iter,
            model: self.model.clone(),
            velocity: self.velocity.clone(),
        }
    }

    pub fn model(&self) -> &ModelState<S> {
        &self.model
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn min_clock(&self) -> u32 {
        self.clocks.min_clock()
    }

    pub fn apply_count(&self, layer: u16) -> u32 {
        self.apply_counts.get(&layer).copied().unwrap_or(0)
    }

    pub fn stamps(&self, layer: u16) -> Vec<u32> {
        self.agg.stamps(layer)
    }

    fn handle_push(
        &mut self,
        src: NodeId,
        msg: UpdateMessage<S>,
        io: &mut dyn NodeIo<S>,
    ) -> Result<()> {
        let layer = msg.layer;
        let clock = msg.clock;
        let worker = msg.worker;
        if src != worker {
            return Err(Error::protocol(format!(
                "push from node {src} claims worker {worker}"
            )));
        }
        let grad = match msg.payload {
            Payload::Tensor(t) => t,
            Payload::Factors(f) => reconstruct_tensor(&f)?,
            _ => return Err(Error::protocol("push without gradient payload")),
        };
        let outcome = self.agg.add(layer, clock, worker, grad)?;
        let ack = match outcome {
            AddOutcome::Accepted => {
                self.clocks.record_push(worker, layer, clock)?;
                self.drain_ready(layer)?;
                AckCode::Ok
            }
            AddOutcome::Duplicate => AckCode::DuplicateDiscarded,
            AddOutcome::Stale => AckCode::StaleRejected,
        };
        io.send(
            src,
            UpdateMessage {
                kind: MsgKind::Ack,
                worker,
                layer,
                clock,
                payload: Payload::Ack(ack),
            },
        );
        Ok(())
    }

    /// Applies every complete (layer, clock) set in clock order. The solver
    /// step (momentum and decay included) runs once per clock, when the last
    /// worker's contribution lands.
    fn drain_ready(&mut self, layer: u16) -> Result<()> {
        while let Some((clock, grad_sum)) = self.agg.take_ready(layer)? {
            let params = self
                .model
                .layer_mut(layer)
                .ok_or_else(|| Error::protocol(format!("layer {layer} has no parameters")))?;
            let vel = self.velocity.layer_mut(layer).expect("velocity mirrors model");
            solver::apply_tensor_update(params, &grad_sum, vel, &self.solver_cfg, clock - 1)?;
            *self.apply_counts.entry(layer).or_insert(0) += 1;
        }
        Ok(())
    }

    fn respond_pull(&self, pull: ParkedPull, io: &mut dyn NodeIo<S>) -> Result<()> {
        let tensor = self
            .model
            .layer(pull.layer)
            .ok_or_else(|| Error::protocol(format!("unknown layer {}", pull.layer)))?
            .clone();
        io.send(
            pull.worker,
            UpdateMessage {
                kind: MsgKind::PullResponse,
                worker: pull.worker,
                layer: pull.layer,
                clock: pull.read_iter,
                payload: Payload::Params {
                    stamps: self.agg.stamps(pull.layer),
                    tensor,
                },
            },
        );
        Ok(())
    }

    fn handle_pull(&mut self, pull: ParkedPull, io: &mut dyn NodeIo<S>) -> Result<()> {
        if !self.agg.tracks(pull.layer) {
            return Err(Error::protocol(format!(
                "pull for unknown layer {}",
                pull.layer
            )));
        }
        let grant = self.clocks.try_read(pull.worker, pull.read_iter);
        if grant.granted {
            // A granted read must already incorporate everything through
            // t-s-1: complete sets apply the moment they complete.
            debug_assert!(
                self.agg.min_stamp(pull.layer) as i64
                    >= pull.read_iter as i64 - self.clocks.staleness() as i64 - 1
            );
            self.respond_pull(pull, io)?;
        } else {
            self.parked.push(pull);
        }
        Ok(())
    }

    fn retry_parked(&mut self, io: &mut dyn NodeIo<S>) -> Result<()> {
        let mut still_parked = Vec::new();
        for pull in std::mem::take(&mut self.parked) {
            if self.clocks.try_read(pull.worker, pull.read_iter).granted {
                self.respond_pull(pull, io)?;
            } else {
                still_parked.push(pull);
            }
        }
        self.parked = still_parked;
        Ok(())
    }
}

impl<S: Scalar> Node<S> for ServerNode<S> {
    fn handle(&mut self, ev: NodeEvent<S>, io: &mut dyn NodeIo<S>) -> Result<()> {
        let (src, msg) = match ev {
            NodeEvent::Start => return Ok(()),
            NodeEvent::Timer(_) => return Err(Error::protocol("server has no timers")),
            NodeEvent::Frame { src, msg, .. } => (src, msg),
        };
        match msg.kind {
            MsgKind::PushFull | MsgKind::PushSf => self.handle_push(src, msg, io),
            MsgKind::PullRequest => self.handle_pull(
                ParkedPull {
                    worker: msg.worker,
                    layer: msg.layer,
                    read_iter: msg.clock,
                },
                io,
            ),
            MsgKind::ClockAdvance => {
                let committed = self.clocks.advance(msg.worker)?;
                if committed != msg.clock {
                    return Err(Error::protocol(format!(
                        "worker {} advanced to {} but announced {}",
                        msg.worker, committed, msg.clock
                    )));
                }
                self.retry_parked(io)
            }
            MsgKind::Ack => Ok(()),
            other => Err(Error::protocol(format!(
                "server cannot handle {other:?}"
            ))),
        }
    }

    fn is_done(&self) -> bool {
        self.clocks.min_clock() >= self.total_iters && self.parked.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::SERVER_NODE;
    use crate::network::{init_params, InputShape, LayerSpec};
    use crate::node::TimerToken;
    use crate::solver::LrPolicy;
    use crate::tensor::DenseMatrix;

    /// Captures outgoing messages for assertions.
    #[derive(Default)]
    struct MockIo<S: Scalar> {
        now: u64,
        sent: Vec<(NodeId, UpdateMessage<S>)>,
    }

    impl<S: Scalar> NodeIo<S> for MockIo<S> {
        fn now(&self) -> u64 {
            self.now
        }
        fn send(&mut self, dst: NodeId, msg: UpdateMessage<S>) {
            self.sent.push((dst, msg));
        }
        fn schedule(&mut self, _delay_ns: u64, _token: TimerToken) {
            panic!("server never schedules timers");
        }
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input: InputShape::Flat(3),
            layers: vec![
                LayerSpec::FullyConnected { out: 2, bias: false },
                LayerSpec::SoftmaxLoss,
            ],
        }
    }

    fn solver_cfg() -> SolverConfig {
        SolverConfig {
            epsilon: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_policy: LrPolicy::Fixed,
            total_iters: 10,
        }
    }

    fn push(worker: u16, layer: u16, clock: u32, grad: Vec<f64>) -> NodeEvent<f64> {
        NodeEvent::Frame {
            src: worker,
            arrived: 0,
            msg: UpdateMessage {
                kind: MsgKind::PushFull,
                worker,
                layer,
                clock,
                payload: Payload::Tensor(crate::network::LayerTensor {
                    weights: DenseMatrix::from_vec(2, 3, grad).unwrap(),
                    bias: None,
                }),
            },
        }
    }

    #[test]
    fn single_worker_push_then_pull_applies_update() {
        let spec = tiny_spec();
        let mut server: ServerNode<f64> =
            ServerNode::new(spec.clone(), solver_cfg(), 7, 1, 0, vec![1], 10).unwrap();
        let mut io = MockIo::default();

        let g = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        server.handle(push(1, 1, 1, g.clone()), &mut io).unwrap();
        server
            .handle(
                NodeEvent::Frame {
                    src: 1,
                    arrived: 0,
                    msg: UpdateMessage::control(MsgKind::ClockAdvance, 1, 0, 1),
                },
                &mut io,
            )
            .unwrap();
        server
            .handle(
                NodeEvent::Frame {
                    src: 1,
                    arrived: 0,
                    msg: UpdateMessage::control(MsgKind::PullRequest, 1, 1, 2),
                },
                &mut io,
            )
            .unwrap();

        // Expected: params = init + (-0.1 * g) with zero initial velocity.
        let init: ModelState<f64> = init_params(&spec, 7).unwrap();
        let want: Vec<f64> = init
            .layer(1)
            .unwrap()
            .weights
            .as_slice()
            .iter()
            .zip(&g)
            .map(|(p, gv)| p - 0.1 * gv)
            .collect();
        let response = io
            .sent
            .iter()
            .find(|(_, m)| m.kind == MsgKind::PullResponse)
            .expect("pull answered");
        match &response.1.payload {
            Payload::Params { tensor, stamps } => {
                assert_eq!(tensor.weights.as_slice(), want.as_slice());
                assert_eq!(stamps, &vec![1]);
            }
            _ => panic!("wrong payload"),
        }
    }

    #[test]
    fn two_pushes_aggregate_once_with_single_momentum_application() {
        let spec = tiny_spec();
        let mut server: ServerNode<f64> =
            ServerNode::new(spec.clone(), solver_cfg(), 7, 2, 0, vec![1], 10).unwrap();
        let mut io = MockIo::default();

        let g1 = vec![1.0, 0.0, 0.5, -1.0, 2.0, 0.25];
        let g2 = vec![0.5, 1.0, -0.5, 1.0, -2.0, 0.75];
        server.handle(push(1, 1, 1, g1.clone()), &mut io).unwrap();
        assert_eq!(server.apply_count(1), 0, "waits for all workers");
        server.handle(push(2, 1, 1, g2.clone()), &mut io).unwrap();
        assert_eq!(server.apply_count(1), 1);

        // Equals one solver application of g1 + g2.
        let init: ModelState<f64> = init_params(&spec, 7).unwrap();
        let mut want = init.layer(1).unwrap().clone();
        let mut vel = crate::network::LayerTensor::zeros_like(&want);
        let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        solver::apply_update_slice(
            want.weights.as_mut_slice(),
            &sum,
            vel.weights.as_mut_slice(),
            0.1,
            0.9,
            0.0,
        );
        assert_eq!(
            server.model().layer(1).unwrap().weights.as_slice(),
            want.weights.as_slice()
        );
    }

    #[test]
    fn duplicate_push_gets_warning_ack() {
        let spec = tiny_spec();
        let mut server: ServerNode<f64> =
            ServerNode::new(spec, solver_cfg(), 7, 2, 0, vec![1], 10).unwrap();
        let mut io = MockIo::default();
        let g = vec![1.0; 6];
        server.handle(push(1, 1, 1, g.clone()), &mut io).unwrap();
        server.handle(push(1, 1, 1, g.clone()), &mut io).unwrap();
        let acks: Vec<AckCode> = io
            .sent
            .iter()
            .filter_map(|(_, m)| match &m.payload {
                Payload::Ack(c) => Some(*c),
                _ => None,
            })
            .collect();
        assert_eq!(acks, vec![AckCode::Ok, AckCode::DuplicateDiscarded]);

        // Completing the clock then re-pushing it is stale.
        server.handle(push(2, 1, 1, g.clone()), &mut io).unwrap();
        server.handle(push(1, 1, 1, g), &mut io).unwrap();
        let last = io.sent.last().unwrap();
        assert!(matches!(last.1.payload, Payload::Ack(AckCode::StaleRejected)));
    }

    #[test]
    fn pull_defers_until_straggler_commits() {
        let spec = tiny_spec();
        let mut server: ServerNode<f64> =
            ServerNode::new(spec, solver_cfg(), 7, 2, 0, vec![1], 10).unwrap();
        let mut io = MockIo::default();
        let g = vec![0.1; 6];

        // Worker 1 finishes iteration 1 and asks to read for iteration 2.
        server.handle(push(1, 1, 1, g.clone()), &mut io).unwrap();
        server
            .handle(
                NodeEvent::Frame {
                    src: 1,
                    arrived: 0,
                    msg: UpdateMessage::control(MsgKind::ClockAdvance, 1, 0, 1),
                },
                &mut io,
            )
            .unwrap();
        server
            .handle(
                NodeEvent::Frame {
                    src: 1,
                    arrived: 0,
                    msg: UpdateMessage::control(MsgKind::PullRequest, 1, 1, 2),
                },
                &mut io,
            )
            .unwrap();
        assert!(
            !io.sent.iter().any(|(_, m)| m.kind == MsgKind::PullResponse),
            "read at t=2 with s=0 must wait for worker 2"
        );

        server.handle(push(2, 1, 1, g), &mut io).unwrap();
        server
            .handle(
                NodeEvent::Frame {
                    src: 2,
                    arrived: 0,
                    msg: UpdateMessage::control(MsgKind::ClockAdvance, 2, 0, 1),
                },
                &mut io,
            )
            .unwrap();
        let resp = io
            .sent
            .iter()
            .find(|(dst, m)| *dst == 1 && m.kind == MsgKind::PullResponse)
            .expect("deferred pull served after advance");
        match &resp.1.payload {
            Payload::Params { stamps, .. } => assert_eq!(stamps, &vec![1, 1]),
            _ => panic!("wrong payload"),
        }
    }

    #[test]
    fn pull_for_unknown_layer_is_protocol_error() {
        let spec = tiny_spec();
        let mut server: ServerNode<f64> =
            ServerNode::new(spec, solver_cfg(), 7, 1, 0, vec![1], 10).unwrap();
        let mut io = MockIo::default();
        let err = server.handle(
            NodeEvent::Frame {
                src: 1,
                arrived: 0,
                msg: UpdateMessage::control(MsgKind::PullRequest, 1, 9, 1),
            },
            &mut io,
        );
        assert!(matches!(err, Err(Error::Protocol(_))));
        let _ = SERVER_NODE;
    }

    #[test]
    fn aggregation_is_arrival_order_invariant() {
        let spec = tiny_spec();
        let g1 = vec![0.3, -0.2, 0.9, 0.1, 0.0, -0.5];
        let g2 = vec![-0.1, 0.4, 0.2, -0.3, 0.6, 0.2];
        let g3 = vec![0.05, 0.15, -0.25, 0.35, -0.45, 0.55];
        let run = |order: [usize; 3]| {
            let mut server: ServerNode<f64> =
                ServerNode::new(spec.clone(), solver_cfg(), 7, 3, 0, vec![1], 10).unwrap();
            let mut io = MockIo::default();
            let pushes = [
                push(1, 1, 1, g1.clone()),
                push(2, 1, 1, g2.clone()),
                push(3, 1, 1, g3.clone()),
            ];
            let mut pushes: Vec<Option<NodeEvent<f64>>> = pushes.into_iter().map(Some).collect();
            for idx in order {
                server.handle(pushes[idx].take().unwrap(), &mut io).unwrap();
            }
            server.model().layer(1).unwrap().weights.clone()
        };
        let a = run([0, 1, 2]);
        let b = run([2, 0, 1]);
        let c = run([1, 2, 0]);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}
