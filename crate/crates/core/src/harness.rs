//! Run orchestration: dataset construction, cluster assembly (simulated or
//! TCP), the single-process reference trainer, evaluation helpers, and the
//! communication-cost benchmark table.

use std::path::Path;
use std::sync::Arc;

use crate::comm::TrafficLedger;
use crate::config::{DataSource, Manifest, Precision, RunConfig, TransportKind};
use crate::data::{self, union_batch_for, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{self, IterationMetrics, RunMeta};
use crate::network::{
    backward_all, forward, init_params, LayerKind, LayerProfile, ModelSpec, ModelState,
};
use crate::scalar::Scalar;
use crate::server::ServerNode;
use crate::sim::{ClusterNode, Simulation};
use crate::solver::{apply_tensor_update, SolverConfig};
use crate::sufficient_factor::{cost, plan_strategies, sacp_decide, Strategy};
use crate::worker::checkpoint::{self, WorkerSnapshot};
use crate::worker::events::{EventLog, IterationReport};
use crate::worker::{DelayModel, WorkerNode, WorkerParams, WorkerRunConfig};

/// Everything a finished in-process run exposes to callers and tests.
pub struct TrainedRun<S: Scalar> {
    /// Per layer: broadcast layers from worker 1's replica, the rest from
    /// the server.
    pub final_model: ModelState<S>,
    pub server_model: ModelState<S>,
    pub worker_models: Vec<ModelState<S>>,
    pub reports: Vec<Vec<IterationReport>>,
    pub event_logs: Vec<EventLog>,
    pub ledger: TrafficLedger,
    pub strategies: Vec<Option<Strategy>>,
    pub meta: RunMeta,
    pub iterations: Vec<IterationMetrics>,
    /// Mean loss per iteration across workers.
    pub losses: Vec<f64>,
    pub virtual_ns: u64,
}

pub fn build_dataset<S: Scalar>(cfg: &RunConfig) -> Result<Dataset<S>> {
    let ds = match cfg.data.source {
        DataSource::Synthetic => data::synth_dataset::<S>(
            cfg.data.classes,
            cfg.data.dim,
            cfg.data.n,
            cfg.run.seed,
            cfg.data.margin,
        )?,
        DataSource::Cifar10 => {
            let path = cfg
                .data
                .path
                .as_ref()
                .ok_or_else(|| Error::config("cifar10 source needs data.path"))?;
            data::load_cifar10::<S>(path)?
        }
    };
    let ds = match cfg.data.limit {
        Some(n) => ds.truncated(n),
        None => ds,
    };
    let classes = cfg.model.classes()?;
    if ds.classes as usize > classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model predicts {}",
            ds.classes, classes
        )));
    }
    if cfg.run.batch_size * cfg.run.workers as usize > ds.len() {
        return Err(Error::config(format!(
            "global batch {} exceeds dataset size {}",
            cfg.run.batch_size * cfg.run.workers as usize,
            ds.len()
        )));
    }
    Ok(ds)
}

fn delay_model(cfg: &RunConfig) -> DelayModel {
    DelayModel {
        fwd_ns: cfg.sim.fwd_ns.clone(),
        bwd_ns: cfg.sim.bwd_ns.clone(),
        jitter: cfg.sim.jitter,
    }
}

fn tracked_server_layers(strategies: &[Option<Strategy>]) -> Vec<u16> {
    strategies
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match s {
            Some(Strategy::FullMatrixPs) | Some(Strategy::SufficientFactorPs) => {
                Some((i + 1) as u16)
            }
            _ => None,
        })
        .collect()
}

fn snapshot_path(dir: &Path, node: u16) -> std::path::PathBuf {
    if node == 0 {
        dir.join("server.ckpt")
    } else {
        dir.join(format!("worker{node}.ckpt"))
    }
}

/// Builds node `id` (0 = server) for this run configuration.
fn build_node<S: Scalar>(
    cfg: &RunConfig,
    dataset: &Arc<Dataset<S>>,
    strategies: &[Option<Strategy>],
    iters: u32,
    id: u16,
    snap: Option<WorkerSnapshot<S>>,
) -> Result<ClusterNode<S>> {
    let p = cfg.run.workers;
    if id == 0 {
        let tracked = tracked_server_layers(strategies);
        let server = match snap {
            Some(snap) => ServerNode::restored(
                cfg.model.clone(),
                cfg.solver,
                p,
                cfg.run.staleness,
                tracked,
                iters,
                snap,
            )?,
            None => ServerNode::new(
                cfg.model.clone(),
                cfg.solver,
                cfg.run.seed,
                p,
                cfg.run.staleness,
                tracked,
                iters,
            )?,
        };
        Ok(ClusterNode::Server(server))
    } else {
        let worker = WorkerNode::new(WorkerParams {
            cfg: WorkerRunConfig {
                worker_id: id,
                workers: p,
                batch: cfg.run.batch_size,
                staleness: cfg.run.staleness,
                dwbp: cfg.run.dwbp,
                iters,
                seed: cfg.run.seed,
            },
            spec: cfg.model.clone(),
            solver_cfg: cfg.solver,
            dataset: Arc::clone(dataset),
            delays: delay_model(cfg),
            strategies: strategies.to_vec(),
            restore: snap,
        })?;
        Ok(ClusterNode::Worker(worker))
    }
}

/// Builds and runs one simulated cluster segment covering iterations
/// (from..=iters], where nodes resume from `restore` when given.
fn run_segment<S: Scalar>(
    cfg: &RunConfig,
    dataset: &Arc<Dataset<S>>,
    strategies: &[Option<Strategy>],
    iters: u32,
    restore: Option<Vec<WorkerSnapshot<S>>>,
) -> Result<Simulation<S>> {
    let p = cfg.run.workers;
    let ledger = TrafficLedger::new();
    let mut sim = Simulation::new(cfg.link.shape(), ledger);
    for id in 0..=p {
        let snap = restore.as_ref().map(|v| v[id as usize].clone());
        sim.add_node(build_node(cfg, dataset, strategies, iters, id, snap)?);
    }
    let budget = 20_000u64
        + iters as u64 * p as u64 * (cfg.model.layers.len() as u64 + 4) * 64 * p as u64;
    sim.run(budget)?;
    Ok(sim)
}

/// Builds one node for a standalone role process (the server and worker
/// subcommands). All nodes plan the identical strategy table from the shared
/// run configuration.
pub fn build_role<S: Scalar>(cfg: &RunConfig, id: u16) -> Result<ClusterNode<S>> {
    cfg.validate()?;
    let profiles = cfg.model.profiles()?;
    let strategies = plan_strategies(
        &profiles,
        cfg.run.protocol,
        cfg.run.workers as u64,
        cfg.run.batch_size as u64,
    );
    if id == 0 {
        let tracked = tracked_server_layers(&strategies);
        Ok(ClusterNode::Server(ServerNode::new(
            cfg.model.clone(),
            cfg.solver,
            cfg.run.seed,
            cfg.run.workers,
            cfg.run.staleness,
            tracked,
            cfg.run.iters,
        )?))
    } else {
        let dataset = Arc::new(build_dataset::<S>(cfg)?);
        build_node(cfg, &dataset, &strategies, cfg.run.iters, id, None)
    }
}

/// Trains over real TCP sockets: all roles run as threads in this process,
/// connected per the manifest (the multi-process deployment runs the server
/// and worker subcommands instead).
pub fn train_tcp<S: Scalar>(cfg: &RunConfig, manifest: &Manifest) -> Result<TrainedRun<S>> {
    cfg.validate()?;
    manifest.validate(cfg.run.workers)?;
    if cfg.output.checkpoint_at.is_some() || cfg.output.restore_from.is_some() {
        return Err(Error::config(
            "checkpoint orchestration is only wired up for the inproc transport",
        ));
    }
    let dataset = Arc::new(build_dataset::<S>(cfg)?);
    let profiles = cfg.model.profiles()?;
    let strategies = plan_strategies(
        &profiles,
        cfg.run.protocol,
        cfg.run.workers as u64,
        cfg.run.batch_size as u64,
    );
    let ledger = TrafficLedger::new();
    let manifest = Arc::new(manifest.clone());

    // Bind every listener before any node dials out.
    let mut listeners = Vec::new();
    for id in 0..=cfg.run.workers {
        let addr = manifest.addr_of(id);
        listeners.push(
            std::net::TcpListener::bind(addr)
                .map_err(|e| Error::Transport(format!("bind {addr}: {e}")))?,
        );
    }

    let mut handles = Vec::new();
    for (id, listener) in (0..=cfg.run.workers).zip(listeners) {
        let node = build_node(cfg, &dataset, &strategies, cfg.run.iters, id, None)?;
        let manifest = Arc::clone(&manifest);
        let ledger = ledger.clone();
        let shape = cfg.link.shape();
        let workers = cfg.run.workers;
        handles.push(std::thread::spawn(move || {
            crate::tcp::run_role(node, id, workers, &manifest, shape, ledger, listener)
        }));
    }

    let mut nodes = Vec::new();
    let start = std::time::Instant::now();
    for h in handles {
        nodes.push(h.join().map_err(|_| Error::Transport("node panicked".into()))??);
    }
    let elapsed_ns = start.elapsed().as_nanos() as u64;
    assemble_run(cfg, profiles, strategies, nodes, ledger, elapsed_ns, Vec::new(), Vec::new())
}

fn snapshots_of<S: Scalar>(sim: &Simulation<S>, next_iter: u32) -> Result<Vec<WorkerSnapshot<S>>> {
    let mut snaps = Vec::new();
    for node in sim.nodes() {
        snaps.push(match node {
            ClusterNode::Server(s) => s.snapshot(next_iter),
            ClusterNode::Worker(w) => w.snapshot()?,
        });
    }
    Ok(snaps)
}

/// Full in-process training run (optionally checkpointing at a boundary and
/// continuing from the written snapshots, or restoring from existing ones).
pub fn run_inproc<S: Scalar>(cfg: &RunConfig) -> Result<TrainedRun<S>> {
    cfg.validate()?;
    let dataset = Arc::new(build_dataset::<S>(cfg)?);
    let profiles = cfg.model.profiles()?;
    let strategies = plan_strategies(
        &profiles,
        cfg.run.protocol,
        cfg.run.workers as u64,
        cfg.run.batch_size as u64,
    );

    let digest = checkpoint::config_digest(&cfg.model, &cfg.solver);
    let mut prior_reports: Vec<Vec<IterationReport>> = Vec::new();
    let mut prior_logs: Vec<EventLog> = Vec::new();

    let restore: Option<Vec<WorkerSnapshot<S>>> = if let Some(dir) = &cfg.output.restore_from {
        let mut snaps = Vec::new();
        for node in 0..=cfg.run.workers {
            let (_, _, snap) =
                checkpoint::read_snapshot::<S>(&snapshot_path(dir, node), &cfg.model, &digest)?;
            snaps.push(snap);
        }
        Some(snaps)
    } else if let Some(at) = cfg.output.checkpoint_at {
        if at == 0 || at >= cfg.run.iters {
            return Err(Error::config("checkpoint_at must be inside the run"));
        }
        // Phase one: run to the boundary and snapshot every node, then
        // continue below from those snapshots.
        let sim = run_segment(cfg, &dataset, &strategies, at, None)?;
        let snaps = snapshots_of(&sim, at + 1)?;
        if let Some(dir) = &cfg.output.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            for (node, snap) in snaps.iter().enumerate() {
                let role = if node == 0 {
                    checkpoint::Role::Server
                } else {
                    checkpoint::Role::Worker
                };
                checkpoint::write_snapshot(
                    &snapshot_path(dir, node as u16),
                    role,
                    node as u16,
                    cfg.run.workers,
                    cfg.run.seed,
                    &digest,
                    snap,
                )?;
            }
        }
        for node in sim.into_nodes() {
            if let ClusterNode::Worker(w) = node {
                prior_reports.push(w.reports().to_vec());
                prior_logs.push(w.event_log().clone());
            }
        }
        Some(snaps)
    } else {
        None
    };

    let sim = run_segment(cfg, &dataset, &strategies, cfg.run.iters, restore)?;
    finish_run(cfg, sim, profiles, strategies, prior_reports, prior_logs)
}

fn finish_run<S: Scalar>(
    cfg: &RunConfig,
    sim: Simulation<S>,
    profiles: Vec<LayerProfile>,
    strategies: Vec<Option<Strategy>>,
    prior_reports: Vec<Vec<IterationReport>>,
    prior_logs: Vec<EventLog>,
) -> Result<TrainedRun<S>> {
    let virtual_ns = sim.now();
    let ledger = sim.ledger().clone();
    let nodes = sim.into_nodes();
    assemble_run(
        cfg,
        profiles,
        strategies,
        nodes,
        ledger,
        virtual_ns,
        prior_reports,
        prior_logs,
    )
}

#[allow(clippy::too_many_arguments)]
fn assemble_run<S: Scalar>(
    cfg: &RunConfig,
    profiles: Vec<LayerProfile>,
    strategies: Vec<Option<Strategy>>,
    nodes: Vec<ClusterNode<S>>,
    ledger: TrafficLedger,
    virtual_ns: u64,
    prior_reports: Vec<Vec<IterationReport>>,
    prior_logs: Vec<EventLog>,
) -> Result<TrainedRun<S>> {
    let mut server_model = None;
    let mut worker_models = Vec::new();
    let mut reports = Vec::new();
    let mut event_logs = Vec::new();
    for (idx, node) in nodes.into_iter().enumerate() {
        match node {
            ClusterNode::Server(s) => server_model = Some(s.model().clone()),
            ClusterNode::Worker(w) => {
                worker_models.push(w.model().clone());
                let mut rep = w.reports().to_vec();
                let mut log = w.event_log().clone();
                if let Some(prior) = prior_reports.get(idx - 1) {
                    let mut merged = prior.clone();
                    merged.extend(rep);
                    rep = merged;
                }
                if let Some(prior) = prior_logs.get(idx - 1) {
                    let mut merged = prior.clone();
                    for r in log.records() {
                        merged.push(*r);
                    }
                    log = merged;
                }
                reports.push(rep);
                event_logs.push(log);
            }
        }
    }
    let server_model = server_model.expect("server present");

    // Assemble the final model: broadcast layers live on the workers.
    let mut final_model = server_model.clone();
    for (idx, strat) in strategies.iter().enumerate() {
        if matches!(strat, Some(Strategy::SufficientFactorBroadcast)) {
            let layer = (idx + 1) as u16;
            final_model.set_layer(layer, worker_models[0].layer(layer).unwrap().clone());
        }
    }

    let meta = metrics::run_meta(
        &profiles,
        &strategies,
        cfg.run.workers,
        cfg.run.batch_size,
        cfg.run.staleness,
        cfg.run.protocol,
        cfg.run.dwbp,
        (S::WIRE_WIDTH * 8) as u8,
    );
    let iterations = metrics::iteration_metrics(&reports, &strategies);
    let losses = iterations.iter().map(|r| r.loss).collect();

    Ok(TrainedRun {
        final_model,
        server_model,
        worker_models,
        reports,
        event_logs,
        ledger,
        strategies,
        meta,
        iterations,
        losses,
        virtual_ns,
    })
}

/// Plain single-process SGD over the union batch: the reference the
/// distributed runs are checked against.
pub fn train_single<S: Scalar>(
    spec: &ModelSpec,
    solver_cfg: &SolverConfig,
    dataset: &Dataset<S>,
    seed: u64,
    iters: u32,
    batch: usize,
) -> Result<(ModelState<S>, Vec<f64>)> {
    let mut model = init_params::<S>(spec, seed)?;
    let mut velocity = model.zeros_like();
    let grad_scale = S::from_f64_lossy(1.0 / batch as f64);
    let mut losses = Vec::with_capacity(iters as usize);
    for t in 1..=iters {
        let b = union_batch_for(dataset, seed, t, batch)?;
        let trace = forward(spec, &model, &b.inputs, &b.labels)?;
        losses.push(trace.loss.to_f64_lossy());
        let records = backward_all(spec, &model, &trace, grad_scale)?;
        for rec in records.iter().rev() {
            if let Some(grad) = &rec.grad {
                let params = model.layer_mut(rec.layer_id).expect("parameterized");
                let vel = velocity.layer_mut(rec.layer_id).expect("parameterized");
                apply_tensor_update(params, grad, vel, solver_cfg, t - 1)?;
            }
        }
    }
    Ok((model, losses))
}

/// Mean loss over (up to `limit` of) the dataset, evaluated in chunks.
pub fn eval_loss<S: Scalar>(
    spec: &ModelSpec,
    state: &ModelState<S>,
    dataset: &Dataset<S>,
    limit: usize,
) -> Result<f64> {
    let n = dataset.len().min(limit);
    let chunk = 256usize;
    let dim = dataset.dim();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut at = 0usize;
    while at < n {
        let hi = (at + chunk).min(n);
        let rows = hi - at;
        let data = dataset.features.as_slice()[at * dim..hi * dim].to_vec();
        let inputs = crate::tensor::DenseMatrix::from_vec(rows, dim, data)?;
        let labels = &dataset.labels[at..hi];
        let trace = forward(spec, state, &inputs, labels)?;
        total += trace.loss.to_f64_lossy() * rows as f64;
        count += rows;
        at = hi;
    }
    Ok(total / count as f64)
}

/// Classification accuracy over (up to `limit` of) the dataset.
pub fn eval_accuracy<S: Scalar>(
    spec: &ModelSpec,
    state: &ModelState<S>,
    dataset: &Dataset<S>,
    limit: usize,
) -> Result<f64> {
    let n = dataset.len().min(limit);
    let chunk = 256usize;
    let dim = dataset.dim();
    let mut hits = 0usize;
    let mut at = 0usize;
    while at < n {
        let hi = (at + chunk).min(n);
        let rows = hi - at;
        let data = dataset.features.as_slice()[at * dim..hi * dim].to_vec();
        let inputs = crate::tensor::DenseMatrix::from_vec(rows, dim, data)?;
        let labels = &dataset.labels[at..hi];
        let trace = forward(spec, state, &inputs, labels)?;
        let probs = trace.activations.last().unwrap();
        for s in 0..rows {
            let row = probs.row(s);
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            if best as u32 == labels[s] {
                hits += 1;
            }
        }
        at = hi;
    }
    Ok(hits as f64 / n as f64)
}

/// One row of the communication benchmark table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchRow {
    pub workers: u64,
    pub batch: u64,
    pub strategy: Strategy,
    pub floats: u64,
    /// The decision rule's pick for an FC layer of this size at (P, K).
    pub decision: Strategy,
}

/// Cost-table generator over ranges of cluster sizes and batch sizes for an
/// M x N fully-connected layer.
pub fn bench_comm(ps: &[u64], ks: &[u64], m: u64, n: u64) -> Result<Vec<BenchRow>> {
    if ps.is_empty() || ks.is_empty() {
        return Err(Error::config("empty P or K range"));
    }
    let profile = LayerProfile {
        layer_id: 1,
        kind: LayerKind::FullyConnected,
        m: m as usize,
        n: n as usize,
        param_count: (m * n) as usize,
        flop_estimate: 0,
    };
    let mut rows = Vec::new();
    for &p in ps {
        for &k in ks {
            let decision = sacp_decide(&profile, p, k);
            for strategy in [
                Strategy::FullMatrixPs,
                Strategy::SufficientFactorPs,
                Strategy::SufficientFactorBroadcast,
            ] {
                rows.push(BenchRow {
                    workers: p,
                    batch: k,
                    strategy,
                    floats: cost(strategy, p, k, m, n).floats,
                    decision,
                });
            }
        }
    }
    Ok(rows)
}

pub fn bench_comm_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("P,K,strategy,floats,decision\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.workers,
            r.batch,
            r.strategy.as_str(),
            r.floats,
            r.decision.as_str()
        ));
    }
    out
}

/// Summary the CLI prints after `train`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainSummary {
    pub iters: u32,
    pub final_loss: f64,
    pub virtual_ns: u64,
    pub total_bytes: u64,
}

/// Precision-dispatching entry point: runs the configured training job and
/// writes the configured outputs.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    match cfg.run.precision {
        Precision::F32 => train_typed::<f32>(cfg),
        Precision::F64 => train_typed::<f64>(cfg),
    }
}

fn train_typed<S: Scalar>(cfg: &RunConfig) -> Result<TrainSummary> {
    let run = match cfg.run.transport {
        TransportKind::Inproc => run_inproc::<S>(cfg)?,
        TransportKind::Tcp => {
            return Err(Error::config(
                "tcp transport: run the server and worker subcommands per the manifest, \
                 or use train_tcp programmatically",
            ))
        }
    };
    write_outputs(cfg, &run)?;
    Ok(TrainSummary {
        iters: cfg.run.iters,
        final_loss: run.losses.last().copied().unwrap_or(f64::NAN),
        virtual_ns: run.virtual_ns,
        total_bytes: run.ledger.total_bytes(),
    })
}

pub fn write_outputs<S: Scalar>(cfg: &RunConfig, run: &TrainedRun<S>) -> Result<()> {
    if let Some(path) = &cfg.output.metrics {
        std::fs::write(path, metrics::to_jsonl(&run.meta, &run.iterations))?;
    }
    if let Some(path) = &cfg.output.summary_csv {
        std::fs::write(path, metrics::to_csv(&run.iterations))?;
    }
    if let Some(dir) = &cfg.output.events_dir {
        std::fs::create_dir_all(dir)?;
        for (i, log) in run.event_logs.iter().enumerate() {
            std::fs::write(dir.join(format!("worker{}.events.jsonl", i + 1)), log.to_jsonl())?;
        }
    }
    Ok(())
}
