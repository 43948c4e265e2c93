//! Metrics emission: a JSON-lines stream (one meta record, then one record
//! per iteration) plus a convergence-curve CSV.
//!
//! The meta record carries the per-layer protocol decisions together with
//! both the decision-rule float count and the expected measured count; for
//! broadcast layers these differ (the closed form counts (P-1)^2 K(M+N),
//! unicast emulation moves P(P-1) K(M+N)), and the gap is deliberately
//! visible here rather than folded away.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::network::{LayerKind, LayerProfile};
use crate::sufficient_factor::{cost, ProtocolOverride, Strategy};
use crate::worker::events::IterationReport;

#[derive(Debug, Clone, Serialize)]
pub struct LayerMeta {
    pub layer: u16,
    pub kind: LayerKind,
    pub m: usize,
    pub n: usize,
    pub strategy: Strategy,
    /// Closed-form floats for the chosen strategy (the decision rule's view).
    pub decision_cost_floats: u64,
    /// Cluster-wide floats a transport will actually move per iteration
    /// (biases excluded). Differs from the decision cost for broadcast.
    pub expected_measured_floats: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMeta {
    pub record: &'static str,
    pub workers: u16,
    pub batch_size: usize,
    pub staleness: u32,
    pub protocol: ProtocolOverride,
    pub dwbp: bool,
    pub precision_bits: u8,
    pub layers: Vec<LayerMeta>,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct LayerTraffic {
    pub pushed_floats: u64,
    pub pulled_floats: u64,
    pub broadcast_floats: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationMetrics {
    pub record: &'static str,
    pub iter: u32,
    /// Commit time of the slowest worker, runtime clock.
    pub time_ns: u64,
    /// Mean local loss across workers.
    pub loss: f64,
    pub observed_staleness: u32,
    /// Keyed by layer id.
    pub layers: BTreeMap<u16, LayerTraffic>,
}

/// Builds the meta record from the planned strategies.
pub fn run_meta(
    profiles: &[LayerProfile],
    strategies: &[Option<Strategy>],
    workers: u16,
    batch_size: usize,
    staleness: u32,
    protocol: ProtocolOverride,
    dwbp: bool,
    precision_bits: u8,
) -> RunMeta {
    let p = workers as u64;
    let k = batch_size as u64;
    let layers = profiles
        .iter()
        .zip(strategies.iter())
        .filter_map(|(prof, strat)| {
            let strategy = (*strat)?;
            let (m, n) = (prof.m as u64, prof.n as u64);
            let decision = cost(strategy, p, k, m, n).floats;
            let expected = match strategy {
                Strategy::FullMatrixPs => 2 * p * m * n,
                Strategy::SufficientFactorPs => p * k * (m + n) + p * m * n,
                Strategy::SufficientFactorBroadcast => p * (p - 1) * k * (m + n),
            };
            Some(LayerMeta {
                layer: prof.layer_id,
                kind: prof.kind,
                m: prof.m,
                n: prof.n,
                strategy,
                decision_cost_floats: decision,
                expected_measured_floats: expected,
            })
        })
        .collect();
    RunMeta {
        record: "meta",
        workers,
        batch_size,
        staleness,
        protocol,
        dwbp,
        precision_bits,
        layers,
    }
}

/// Merges per-worker iteration reports into one record per iteration.
/// Reports are indexed `[worker-1][iteration-1]`.
pub fn iteration_metrics(
    reports: &[Vec<IterationReport>],
    strategies: &[Option<Strategy>],
) -> Vec<IterationMetrics> {
    let iters = reports.iter().map(|r| r.len()).min().unwrap_or(0);
    let mut out = Vec::with_capacity(iters);
    for i in 0..iters {
        let mut layers: BTreeMap<u16, LayerTraffic> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut time_ns = 0u64;
        let mut staleness = 0u32;
        for per_worker in reports {
            let rep = &per_worker[i];
            loss_sum += rep.loss;
            time_ns = time_ns.max(rep.committed_ns);
            staleness = staleness.max(rep.observed_staleness);
            for comm in &rep.comm {
                let entry = layers.entry(comm.layer).or_default();
                match comm.strategy {
                    Strategy::SufficientFactorBroadcast => {
                        entry.broadcast_floats += comm.floats_sent
                    }
                    _ => entry.pushed_floats += comm.floats_sent,
                }
            }
            for (&layer, &floats) in &rep.floats_received_by_layer {
                let is_broadcast = matches!(
                    strategies.get((layer - 1) as usize),
                    Some(Some(Strategy::SufficientFactorBroadcast))
                );
                // Broadcast receipts are the peers' sends, already counted on
                // the send side; only server responses count as pulls.
                if !is_broadcast {
                    layers.entry(layer).or_default().pulled_floats += floats;
                }
            }
        }
        out.push(IterationMetrics {
            record: "iteration",
            iter: (i + 1) as u32,
            time_ns,
            loss: loss_sum / reports.len() as f64,
            observed_staleness: staleness,
            layers,
        });
    }
    out
}

/// Serializes meta + iteration records as JSON lines.
pub fn to_jsonl(meta: &RunMeta, iterations: &[IterationMetrics]) -> String {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(meta).expect("meta serializes"));
    out.push('\n');
    for rec in iterations {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Convergence curve: iteration, commit time, mean loss.
pub fn to_csv(iterations: &[IterationMetrics]) -> String {
    let mut out = String::from("iter,time_ns,loss\n");
    for rec in iterations {
        out.push_str(&format!("{},{},{}\n", rec.iter, rec.time_ns, rec.loss));
    }
    out
}
