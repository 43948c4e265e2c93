//! The worker loop: per-iteration forward, strictly top-down backward with
//! per-layer communication launched the moment each layer's gradient exists,
//! and the peer-broadcast path with local reconstruction.
//!
//! The worker is an event-driven state machine. Compute steps occupy
//! intervals on the runtime clock (injected per-layer delays in simulation,
//! real time over TCP); frames are handled at their arrival times, which is
//! what lets upper-layer communication overlap lower-layer computation. The
//! forward pass gates per layer: layer i's forward at iteration t+1 waits
//! only for layer i's own communication task from iteration t, not for the
//! whole round.

pub mod checkpoint;
pub mod events;

use std::sync::Arc;

use crate::aggregate::{AddOutcome, UpdateAggregator};
use crate::comm::wire::{AckCode, MsgKind, Payload, UpdateMessage};
use crate::comm::{NodeId, SERVER_NODE};
use crate::consistency::ClockTable;
use crate::data::{batch_for, mix64, Dataset};
use crate::error::{Error, Result};
use crate::network::{
    backward_layer, forward_layer, init_params, BackwardRecord, ForwardTrace, LayerDims,
    ModelSpec, ModelState,
};
use crate::node::{Node, NodeEvent, NodeIo, TimerToken};
use crate::scalar::Scalar;
use crate::solver::{self, SolverConfig};
use crate::sufficient_factor::{decompose, reconstruct_tensor, Strategy};
use crate::tensor::DenseMatrix;
use events::{EventKind, EventLog, IterationReport, LayerCommReport, LogRecord};

/// Static per-worker run parameters.
#[derive(Debug, Clone, Copy)]
pub struct WorkerRunConfig {
    /// 1-based worker id.
    pub worker_id: u16,
    pub workers: u16,
    /// Local batch size K.
    pub batch: usize,
    pub staleness: u32,
    pub dwbp: bool,
    pub iters: u32,
    pub seed: u64,
}

/// Injected compute durations for simulation runs; zero by default. Jitter
/// is stateless (hashed from seed, worker, iteration, layer) so checkpoint
/// restores replay identical delays.
#[derive(Debug, Clone, Default)]
pub struct DelayModel {
    /// Per-layer forward durations (empty = all zero).
    pub fwd_ns: Vec<u64>,
    pub bwd_ns: Vec<u64>,
    /// Multiplicative jitter fraction in [0, 1).
    pub jitter: f64,
}

impl DelayModel {
    fn sample(&self, base: u64, seed: u64, worker: u16, iter: u32, layer: u16, salt: u64) -> u64 {
        if base == 0 {
            return 0;
        }
        if self.jitter == 0.0 {
            return base;
        }
        let h = mix64(
            mix64(seed, 0xDE1A ^ worker as u64),
            ((iter as u64) << 24) ^ ((layer as u64) << 8) ^ salt,
        );
        let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
        let factor = 1.0 - self.jitter + 2.0 * self.jitter * unit;
        (base as f64 * factor).round() as u64
    }

    pub fn fwd(&self, seed: u64, worker: u16, iter: u32, layer: u16) -> u64 {
        let base = self.fwd_ns.get((layer - 1) as usize).copied().unwrap_or(0);
        self.sample(base, seed, worker, iter, layer, 1)
    }

    pub fn bwd(&self, seed: u64, worker: u16, iter: u32, layer: u16) -> u64 {
        let base = self.bwd_ns.get((layer - 1) as usize).copied().unwrap_or(0);
        self.sample(base, seed, worker, iter, layer, 2)
    }
}

/// One layer's in-flight communication for a given clock.
#[derive(Debug, Clone, Copy)]
struct CommTask {
    clock: u32,
    strategy: Strategy,
    updated: bool,
    comm_start: u64,
    comm_end: Option<u64>,
    floats_sent: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Boot,
    /// Waiting for the named layer's previous task to complete.
    ForwardGate(u16),
    ForwardRun(u16),
    BackwardRun(u16),
    Finished,
}

/// Everything needed to build a worker.
pub struct WorkerParams<S: Scalar> {
    pub cfg: WorkerRunConfig,
    pub spec: ModelSpec,
    pub solver_cfg: SolverConfig,
    pub dataset: Arc<Dataset<S>>,
    pub delays: DelayModel,
    /// Per layer (index layer_id-1): None for fixed-function layers.
    pub strategies: Vec<Option<Strategy>>,
    /// Resume state from a snapshot; fresh init otherwise.
    pub restore: Option<checkpoint::WorkerSnapshot<S>>,
}

pub struct WorkerNode<S: Scalar> {
    cfg: WorkerRunConfig,
    spec: ModelSpec,
    dims: Vec<LayerDims>,
    strategies: Vec<Option<Strategy>>,
    solver_cfg: SolverConfig,
    model: ModelState<S>,
    /// Momentum buffers for broadcast layers (applied identically at every
    /// peer, so replicas stay bit-consistent).
    velocity: ModelState<S>,
    agg: UpdateAggregator<S>,
    clocks: ClockTable,
    dataset: Arc<Dataset<S>>,
    delays: DelayModel,
    grad_scale: S,

    t: u32,
    restored: bool,
    phase: Phase,
    labels: Vec<u32>,
    activations: Vec<DenseMatrix<S>>,
    trace: Option<ForwardTrace<S>>,
    upstream: Option<DenseMatrix<S>>,
    stash: Vec<BackwardRecord<S>>,
    tasks: Vec<Option<CommTask>>,
    current_loss: f64,

    log: EventLog,
    reports: Vec<IterationReport>,
    iter_started_ns: u64,
    iter_floats_sent: u64,
    iter_floats_received: u64,
    iter_recv_by_layer: std::collections::BTreeMap<u16, u64>,
    iter_observed_staleness: u32,
    ack_warnings: u32,
}

impl<S: Scalar> WorkerNode<S> {
    pub fn new(params: WorkerParams<S>) -> Result<Self> {
        let WorkerParams {
            cfg,
            spec,
            solver_cfg,
            dataset,
            delays,
            strategies,
            restore,
        } = params;
        if cfg.worker_id == 0 || cfg.worker_id > cfg.workers {
            return Err(Error::config("worker id out of range"));
        }
        let dims = spec.dims()?;
        if strategies.len() != spec.layers.len() {
            return Err(Error::config("strategy table length mismatch"));
        }
        let broadcast_layers: Vec<u16> = strategies
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                matches!(s, Some(Strategy::SufficientFactorBroadcast)).then_some((i + 1) as u16)
            })
            .collect();

        let restored = restore.is_some();
        let (model, velocity, start_iter) = match restore {
            Some(snap) => (snap.model, snap.velocity, snap.next_iter),
            None => {
                let model = init_params::<S>(&spec, cfg.seed)?;
                let velocity = model.zeros_like();
                (model, velocity, 1)
            }
        };
        let completed = start_iter - 1;
        let grad_scale =
            S::from_f64_lossy(1.0 / (cfg.batch as f64 * cfg.workers as f64));

        let mut clocks = ClockTable::new(cfg.workers, cfg.staleness, broadcast_layers.clone());
        let agg = UpdateAggregator::resume(&broadcast_layers, cfg.workers, completed);
        if completed > 0 {
            // Rebuild the boundary state: every worker committed `completed`.
            for w in 1..=cfg.workers {
                for &l in &broadcast_layers {
                    clocks.record_push(w, l, completed)?;
                }
                for _ in 0..completed {
                    clocks.advance(w)?;
                }
            }
        }

        let n_layers = spec.layers.len();
        Ok(WorkerNode {
            cfg,
            spec,
            dims,
            strategies,
            solver_cfg,
            model,
            velocity,
            agg,
            clocks,
            dataset,
            delays,
            grad_scale,
            t: start_iter,
            restored,
            phase: Phase::Boot,
            labels: Vec::new(),
            activations: Vec::new(),
            trace: None,
            upstream: None,
            stash: Vec::new(),
            tasks: vec![None; n_layers],
            current_loss: 0.0,
            log: EventLog::default(),
            reports: Vec::new(),
            iter_started_ns: 0,
            iter_floats_sent: 0,
            iter_floats_received: 0,
            iter_recv_by_layer: Default::default(),
            iter_observed_staleness: 0,
            ack_warnings: 0,
        })
    }

    pub fn model(&self) -> &ModelState<S> {
        &self.model
    }

    pub fn velocity(&self) -> &ModelState<S> {
        &self.velocity
    }

    pub fn event_log(&self) -> &EventLog {
        &self.log
    }

    pub fn reports(&self) -> &[IterationReport] {
        &self.reports
    }

    pub fn worker_id(&self) -> u16 {
        self.cfg.worker_id
    }

    pub fn next_iter(&self) -> u32 {
        self.t
    }

    pub fn ack_warnings(&self) -> u32 {
        self.ack_warnings
    }

    pub fn snapshot(&self) -> Result<checkpoint::WorkerSnapshot<S>> {
        if !matches!(self.phase, Phase::Finished | Phase::Boot) {
            return Err(Error::protocol(
                "snapshots are only taken at iteration boundaries",
            ));
        }
        Ok(checkpoint::WorkerSnapshot {
            next_iter: self.t,
            model: self.model.clone(),
            velocity: self.velocity.clone(),
        })
    }

    fn record(&mut self, iter: u32, layer: u16, kind: EventKind, time_ns: u64) {
        self.log.push(LogRecord {
            worker: self.cfg.worker_id,
            iter,
            layer,
            time_ns,
            kind,
        });
    }

    fn num_layers(&self) -> u16 {
        self.spec.layers.len() as u16
    }

    fn start_iteration(&mut self, io: &mut dyn NodeIo<S>) -> Result<()> {
        if self.t > self.cfg.iters {
            self.phase = Phase::Finished;
            return Ok(());
        }
        let batch = batch_for(
            &self.dataset,
            self.cfg.seed,
            self.t,
            self.cfg.worker_id,
            self.cfg.workers,
            self.cfg.batch,
        )?;
        self.labels = batch.labels;
        self.activations = vec![batch.inputs];
        self.trace = None;
        self.iter_started_ns = io.now();
        self.iter_floats_sent = 0;
        self.iter_floats_received = 0;
        self.iter_recv_by_layer.clear();
        self.iter_observed_staleness = 0;
        self.advance_forward(io)
    }

    fn gate_ok(&self, layer: u16) -> bool {
        match &self.tasks[(layer - 1) as usize] {
            None => true,
            Some(task) => task.updated,
        }
    }

    /// Starts the next forward layer if its gate is open, otherwise parks.
    fn advance_forward(&mut self, io: &mut dyn NodeIo<S>) -> Result<()> {
        let next = self.activations.len() as u16;
        if next > self.num_layers() {
            return self.begin_backward(io);
        }
        if !self.gate_ok(next) {
            self.phase = Phase::ForwardGate(next);
            return Ok(());
        }
        self.phase = Phase::ForwardRun(next);
        let now = io.now();
        self.record(self.t, next, EventKind::ForwardStart, now);
        let d = self
            .delays
            .fwd(self.cfg.seed, self.cfg.worker_id, self.t, next);
        io.schedule(d, TimerToken::ForwardDone(next));
        Ok(())
    }

    fn on_forward_done(&mut self, layer: u16, io: &mut dyn NodeIo<S>) -> Result<()> {
        debug_assert_eq!(self.phase, Phase::ForwardRun(layer));
        let loss = forward_layer(
            &self.spec,
            &self.dims,
            &self.model,
            &mut self.activations,
            &self.labels,
            layer,
        )?;
        if let Some(l) = loss {
            self.current_loss = l.to_f64_lossy();
        }
        self.record(self.t, layer, EventKind::ForwardEnd, io.now());
        self.advance_forward(io)
    }

    fn begin_backward(&mut self, io: &mut dyn NodeIo<S>) -> Result<()> {
        self.trace = Some(ForwardTrace {
            activations: std::mem::take(&mut self.activations),
            labels: std::mem::take(&mut self.labels),
            loss: S::from_f64_lossy(self.current_loss),
        });
        self.upstream = None;
        self.schedule_backward(self.num_layers(), io)
    }

    fn schedule_backward(&mut self, layer: u16, io: &mut dyn NodeIo<S>) -> Result<()> {
        self.phase = Phase::BackwardRun(layer);
        let now = io.now();
        self.record(self.t, layer, EventKind::BackwardStart, now);
        let d = self
            .delays
            .bwd(self.cfg.seed, self.cfg.worker_id, self.t, layer);
        io.schedule(d, TimerToken::BackwardDone(layer));
        Ok(())
    }

    fn on_backward_done(&mut self, layer: u16, io: &mut dyn NodeIo<S>) -> Result<()> {
        debug_assert_eq!(self.phase, Phase::BackwardRun(layer));
        let upstream = self.upstream.take();
        let trace = self.trace.as_ref().expect("backward follows forward");
        let rec = backward_layer(
            &self.spec,
            &self.dims,
            &self.model,
            trace,
            layer,
            upstream,
            self.grad_scale,
        )?;
        self.record(self.t, layer, EventKind::BackwardEnd, io.now());
        self.upstream = rec.down_error.clone();
        if rec.grad.is_some() {
            if self.cfg.dwbp {
                self.launch_comm(rec, io)?;
            } else {
                self.stash.push(rec);
            }
        }
        if layer > 1 {
            self.schedule_backward(layer - 1, io)
        } else {
            self.end_backward(io)
        }
    }

    /// Pushes one layer's gradient out (and requests fresh parameters) the
    /// moment it exists.
    fn launch_comm(&mut self, rec: BackwardRecord<S>, io: &mut dyn NodeIo<S>) -> Result<()> {
        let layer = rec.layer_id;
        let strategy = self.strategies[(layer - 1) as usize]
            .ok_or_else(|| Error::protocol(format!("layer {layer} has no strategy")))?;
        let now = io.now();
        self.record(self.t, layer, EventKind::CommStart, now);
        let mut task = CommTask {
            clock: self.t,
            strategy,
            updated: false,
            comm_start: now,
            comm_end: None,
            floats_sent: 0,
        };
        let p = self.cfg.worker_id;
        match strategy {
            Strategy::FullMatrixPs | Strategy::SufficientFactorPs => {
                let msg = match strategy {
                    Strategy::FullMatrixPs => UpdateMessage {
                        kind: MsgKind::PushFull,
                        worker: p,
                        layer,
                        clock: self.t,
                        payload: Payload::Tensor(rec.grad.expect("parameterized layer")),
                    },
                    _ => {
                        let mut set = decompose(&rec)?;
                        set.clock = self.t;
                        set.worker_id = p;
                        UpdateMessage {
                            kind: MsgKind::PushSf,
                            worker: p,
                            layer,
                            clock: self.t,
                            payload: Payload::Factors(set),
                        }
                    }
                };
                task.floats_sent += msg.payload_floats();
                io.send(SERVER_NODE, msg);
                // Pull unconditionally (even at the final iteration) so every
                // iteration moves identical traffic; the response to the last
                // pull simply goes unused.
                io.send(
                    SERVER_NODE,
                    UpdateMessage::control(MsgKind::PullRequest, p, layer, self.t + 1),
                );
            }
            Strategy::SufficientFactorBroadcast => {
                let mut set = decompose(&rec)?;
                set.clock = self.t;
                set.worker_id = p;
                // Own contribution: the gradient from backward is accumulated
                // in exactly the factor order, so it is bit-identical to what
                // peers reconstruct from the broadcast set.
                let own = rec.grad.expect("parameterized layer");
                debug_assert_eq!(reconstruct_tensor(&set)?, own);
                self.clocks.record_push(p, layer, self.t)?;
                if self.agg.add(layer, self.t, p, own)? != AddOutcome::Accepted {
                    return Err(Error::protocol("own contribution rejected"));
                }
                for q in 1..=self.cfg.workers {
                    if q == p {
                        continue;
                    }
                    let msg = UpdateMessage {
                        kind: MsgKind::SfBroadcast,
                        worker: p,
                        layer,
                        clock: self.t,
                        payload: Payload::Factors(set.clone()),
                    };
                    task.floats_sent += msg.payload_floats();
                    io.send(q, msg);
                }
                self.apply_ready(layer)?;
            }
        }
        self.iter_floats_sent += task.floats_sent;
        self.tasks[(layer - 1) as usize] = Some(task);
        Ok(())
    }

    fn end_backward(&mut self, io: &mut dyn NodeIo<S>) -> Result<()> {
        if !self.cfg.dwbp {
            // Sequential baseline: all communication after the full backward
            // pass, top layer first.
            for rec in std::mem::take(&mut self.stash) {
                self.launch_comm(rec, io)?;
            }
        }
        self.trace = None;
        // Clock commit is the final act of the iteration.
        self.clocks.advance(self.cfg.worker_id)?;
        let advance =
            UpdateMessage::control(MsgKind::ClockAdvance, self.cfg.worker_id, 0, self.t);
        io.send(SERVER_NODE, advance.clone());
        for q in 1..=self.cfg.workers {
            if q != self.cfg.worker_id {
                io.send(q, advance.clone());
            }
        }
        let now = io.now();
        self.record(self.t, 0, EventKind::ClockCommit, now);
        self.reeval_broadcast_tasks(now);
        self.emit_report(now);
        self.t += 1;
        self.start_iteration(io)
    }

    fn emit_report(&mut self, now: u64) {
        let mut comm = Vec::new();
        for (idx, task) in self.tasks.iter().enumerate() {
            let Some(task) = task else { continue };
            if task.clock == self.t {
                comm.push(LayerCommReport {
                    layer: (idx + 1) as u16,
                    strategy: task.strategy,
                    comm_start_ns: task.comm_start,
                    comm_end_ns: task.comm_end,
                    floats_sent: task.floats_sent,
                });
            }
        }
        self.reports.push(IterationReport {
            worker: self.cfg.worker_id,
            iter: self.t,
            loss: self.current_loss,
            started_ns: self.iter_started_ns,
            committed_ns: now,
            floats_sent: self.iter_floats_sent,
            floats_received: self.iter_floats_received,
            floats_received_by_layer: std::mem::take(&mut self.iter_recv_by_layer),
            observed_staleness: self.iter_observed_staleness,
            comm,
        });
    }

    /// Applies every complete (layer, clock) set in clock order; all peers
    /// run the identical reduction, keeping replicas bit-consistent.
    fn apply_ready(&mut self, layer: u16) -> Result<()> {
        while let Some((clock, grad_sum)) = self.agg.take_ready(layer)? {
            let params = self
                .model
                .layer_mut(layer)
                .ok_or_else(|| Error::protocol(format!("layer {layer} has no parameters")))?;
            let vel = self.velocity.layer_mut(layer).expect("velocity mirrors model");
            solver::apply_tensor_update(params, &grad_sum, vel, &self.solver_cfg, clock - 1)?;
        }
        Ok(())
    }

    /// Marks broadcast tasks updated once the staleness rule grants the next
    /// iteration's read and the layer has applied far enough.
    fn reeval_broadcast_tasks(&mut self, now: u64) {
        let p = self.cfg.worker_id;
        let s = self.cfg.staleness;
        for idx in 0..self.tasks.len() {
            let layer = (idx + 1) as u16;
            let Some(task) = &self.tasks[idx] else { continue };
            if task.updated || task.strategy != Strategy::SufficientFactorBroadcast {
                continue;
            }
            let read_iter = task.clock + 1;
            let grant = self.clocks.try_read(p, read_iter);
            let applied_ok = self.agg.applied_through(layer) + s >= task.clock;
            if grant.granted && applied_ok {
                let clock = task.clock;
                let min_stamp = self.agg.min_stamp(layer);
                let task = self.tasks[idx].as_mut().unwrap();
                task.updated = true;
                task.comm_end = Some(now);
                self.record(clock, layer, EventKind::CommEnd, now);
                self.record(read_iter, layer, EventKind::GrantObserved { min_stamp }, now);
                self.note_staleness(read_iter, min_stamp);
            }
        }
    }

    fn note_staleness(&mut self, read_iter: u32, min_stamp: u32) {
        let observed = (read_iter - 1).saturating_sub(min_stamp);
        debug_assert!(
            observed <= self.cfg.staleness,
            "granted read at {read_iter} saw min stamp {min_stamp}"
        );
        self.iter_observed_staleness = self.iter_observed_staleness.max(observed);
    }

    /// After a restore, server-routed layers must be re-pulled before first
    /// use; broadcast layers resumed locally and need nothing.
    fn request_restore_pulls(&mut self, io: &mut dyn NodeIo<S>) {
        let p = self.cfg.worker_id;
        let now = io.now();
        for idx in 0..self.strategies.len() {
            let Some(strategy) = self.strategies[idx] else { continue };
            if strategy == Strategy::SufficientFactorBroadcast {
                continue;
            }
            let layer = (idx + 1) as u16;
            io.send(
                SERVER_NODE,
                UpdateMessage::control(MsgKind::PullRequest, p, layer, self.t),
            );
            self.tasks[idx] = Some(CommTask {
                clock: self.t - 1,
                strategy,
                updated: false,
                comm_start: now,
                comm_end: None,
                floats_sent: 0,
            });
        }
    }

    fn on_frame(
        &mut self,
        src: NodeId,
        msg: UpdateMessage<S>,
        arrived: u64,
        io: &mut dyn NodeIo<S>,
    ) -> Result<()> {
        match msg.kind {
            MsgKind::PullResponse => {
                let layer = msg.layer;
                let read_iter = msg.clock;
                let floats = msg.payload_floats();
                let Payload::Params { stamps, tensor } = msg.payload else {
                    return Err(Error::protocol("pull response without params"));
                };
                self.iter_floats_received += floats;
                *self.iter_recv_by_layer.entry(layer).or_insert(0) += floats;
                self.model.set_layer(layer, tensor);
                let task = self.tasks[(layer - 1) as usize]
                    .as_mut()
                    .ok_or_else(|| Error::protocol("pull response without task"))?;
                if task.clock + 1 != read_iter {
                    return Err(Error::protocol(format!(
                        "pull response for read {} but task clock {}",
                        read_iter, task.clock
                    )));
                }
                let clock = task.clock;
                task.updated = true;
                task.comm_end = Some(arrived);
                self.record(clock, layer, EventKind::CommEnd, arrived);
                let min_stamp = stamps.iter().copied().min().unwrap_or(0);
                self.record(
                    read_iter,
                    layer,
                    EventKind::GrantObserved { min_stamp },
                    arrived,
                );
                self.note_staleness(read_iter, min_stamp);
            }
            MsgKind::SfBroadcast => {
                let Payload::Factors(set) = &msg.payload else {
                    return Err(Error::protocol("broadcast without factors"));
                };
                let grad = reconstruct_tensor(set)?;
                self.iter_floats_received += msg.payload_floats();
                *self.iter_recv_by_layer.entry(msg.layer).or_insert(0) += msg.payload_floats();
                self.clocks.record_push(msg.worker, msg.layer, msg.clock)?;
                match self.agg.add(msg.layer, msg.clock, msg.worker, grad)? {
                    AddOutcome::Accepted => {}
                    other => {
                        return Err(Error::protocol(format!(
                            "peer broadcast rejected: {other:?}"
                        )))
                    }
                }
                self.apply_ready(msg.layer)?;
                self.reeval_broadcast_tasks(arrived);
            }
            MsgKind::ClockAdvance => {
                let committed = self.clocks.advance(msg.worker)?;
                if committed != msg.clock {
                    return Err(Error::protocol(format!(
                        "peer {} advanced to {} but announced {}",
                        msg.worker, committed, msg.clock
                    )));
                }
                self.reeval_broadcast_tasks(arrived);
            }
            MsgKind::Ack => {
                let Payload::Ack(code) = msg.payload else {
                    return Err(Error::protocol("ack without code"));
                };
                if code != AckCode::Ok {
                    self.ack_warnings += 1;
                }
            }
            other => {
                return Err(Error::protocol(format!(
                    "worker cannot handle {other:?} from {src}"
                )))
            }
        }
        if let Phase::ForwardGate(_) = self.phase {
            self.advance_forward(io)?;
        }
        Ok(())
    }
}

impl<S: Scalar> Node<S> for WorkerNode<S> {
    fn handle(&mut self, ev: NodeEvent<S>, io: &mut dyn NodeIo<S>) -> Result<()> {
        match ev {
            NodeEvent::Start => {
                debug_assert_eq!(self.phase, Phase::Boot);
                if self.restored && self.t <= self.cfg.iters {
                    self.request_restore_pulls(io);
                }
                self.start_iteration(io)
            }
            NodeEvent::Timer(TimerToken::ForwardDone(layer)) => self.on_forward_done(layer, io),
            NodeEvent::Timer(TimerToken::BackwardDone(layer)) => self.on_backward_done(layer, io),
            NodeEvent::Frame { src, msg, arrived } => self.on_frame(src, msg, arrived, io),
        }
    }

    fn is_done(&self) -> bool {
        self.phase == Phase::Finished && self.agg.fully_applied(self.cfg.iters)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_is_stateless_and_bounded() {
        let model = DelayModel {
            fwd_ns: vec![1_000_000; 4],
            bwd_ns: vec![2_000_000; 4],
            jitter: 0.25,
        };
        for layer in 1..=4u16 {
            for iter in 1..=16u32 {
                let a = model.bwd(7, 2, iter, layer);
                let b = model.bwd(7, 2, iter, layer);
                assert_eq!(a, b, "same coordinates must replay the same delay");
                let lo = (2_000_000.0 * 0.75) as u64;
                let hi = (2_000_000.0 * 1.25) as u64;
                assert!((lo..=hi).contains(&a), "delay {a} outside jitter band");
            }
        }
        // Different workers see different draws somewhere.
        let spread: std::collections::BTreeSet<u64> =
            (1..=8u16).map(|w| model.fwd(7, w, 3, 2)).collect();
        assert!(spread.len() > 1);
    }

    #[test]
    fn zero_base_delay_stays_zero() {
        let model = DelayModel {
            fwd_ns: vec![],
            bwd_ns: vec![0; 3],
            jitter: 0.9,
        };
        assert_eq!(model.fwd(1, 1, 1, 1), 0);
        assert_eq!(model.bwd(1, 1, 1, 2), 0);
    }
}
