//! End-to-end tests of the simulated cluster runtime against the
//! single-process reference trainer.

use layercast_core::config::{
    DataSection, DataSource, LinkSection, OutputSection, Precision, RunConfig, RunSection,
    SimSection, TransportKind,
};
use layercast_core::harness::{self, run_inproc, train_single};
use layercast_core::network::{InputShape, LayerSpec, ModelSpec};
use layercast_core::solver::{LrPolicy, SolverConfig};
use layercast_core::sufficient_factor::ProtocolOverride;

fn fc_model(input: usize, hidden: usize, classes: usize) -> ModelSpec {
    ModelSpec {
        input: InputShape::Flat(input),
        layers: vec![
            LayerSpec::FullyConnected {
                out: hidden,
                bias: true,
            },
            LayerSpec::Relu,
            LayerSpec::FullyConnected {
                out: classes,
                bias: true,
            },
            LayerSpec::SoftmaxLoss,
        ],
    }
}

fn base_config(workers: u16, batch: usize, iters: u32, protocol: ProtocolOverride) -> RunConfig {
    RunConfig {
        run: RunSection {
            seed: 42,
            iters,
            precision: Precision::F64,
            workers,
            batch_size: batch,
            staleness: 0,
            protocol,
            dwbp: true,
            transport: TransportKind::Inproc,
        },
        link: LinkSection::default(),
        data: DataSection {
            source: DataSource::Synthetic,
            path: None,
            limit: None,
            classes: 3,
            dim: 12,
            n: 480,
            margin: 4.0,
        },
        model: fc_model(12, 10, 3),
        solver: SolverConfig {
            epsilon: 0.05,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_policy: LrPolicy::Fixed,
            total_iters: 1000,
        },
        sim: SimSection::default(),
        output: OutputSection::default(),
    }
}

#[test]
fn single_worker_matches_reference_trainer_bit_exactly() {
    for protocol in [
        ProtocolOverride::Auto,
        ProtocolOverride::FullPs,
        ProtocolOverride::SfPs,
        ProtocolOverride::Sfb,
    ] {
        let cfg = base_config(1, 16, 30, protocol);
        let run = run_inproc::<f64>(&cfg).unwrap();
        let dataset = harness::build_dataset::<f64>(&cfg).unwrap();
        let (reference, ref_losses) =
            train_single::<f64>(&cfg.model, &cfg.solver, &dataset, 42, 30, 16).unwrap();
        assert_eq!(
            run.final_model, reference,
            "protocol {protocol:?} diverged from the reference loop"
        );
        let run_losses: Vec<f64> = run.reports[0].iter().map(|r| r.loss).collect();
        assert_eq!(run_losses, ref_losses, "loss sequences differ");
    }
}

#[test]
fn four_worker_bsp_matches_union_batch_reference() {
    for protocol in [
        ProtocolOverride::FullPs,
        ProtocolOverride::SfPs,
        ProtocolOverride::Sfb,
    ] {
        let cfg = base_config(4, 4, 40, protocol);
        let run = run_inproc::<f64>(&cfg).unwrap();
        let dataset = harness::build_dataset::<f64>(&cfg).unwrap();
        let (reference, _) =
            train_single::<f64>(&cfg.model, &cfg.solver, &dataset, 42, 40, 16).unwrap();
        let diff = run.final_model.max_rel_diff(&reference);
        assert!(
            diff < 1e-6,
            "protocol {protocol:?}: distributed BSP diverged, rel diff {diff}"
        );
    }
}

#[test]
fn broadcast_replicas_agree_bit_exactly_under_bsp() {
    let cfg = base_config(2, 8, 25, ProtocolOverride::Sfb);
    let run = run_inproc::<f64>(&cfg).unwrap();
    // All FC layers were broadcast; replicas must be identical.
    for layer in [1u16, 3u16] {
        assert_eq!(
            run.worker_models[0].layer(layer),
            run.worker_models[1].layer(layer),
            "replicas diverged on layer {layer}"
        );
    }
}

#[test]
fn dwbp_toggle_preserves_results_bit_for_bit() {
    let mut on = base_config(2, 8, 25, ProtocolOverride::Auto);
    on.run.dwbp = true;
    let mut off = on.clone();
    off.run.dwbp = false;
    let run_on = run_inproc::<f64>(&on).unwrap();
    let run_off = run_inproc::<f64>(&off).unwrap();
    assert_eq!(run_on.final_model, run_off.final_model);
}

#[test]
fn identical_configs_reproduce_identical_metrics() {
    let mut cfg = base_config(3, 4, 15, ProtocolOverride::Auto);
    cfg.sim.bwd_ns = vec![500, 500, 500, 500];
    cfg.sim.jitter = 0.3;
    cfg.link.bandwidth = 200_000;
    cfg.link.latency_ms = 0.01;
    let a = run_inproc::<f64>(&cfg).unwrap();
    let b = run_inproc::<f64>(&cfg).unwrap();
    let ja = layercast_core::metrics::to_jsonl(&a.meta, &a.iterations);
    let jb = layercast_core::metrics::to_jsonl(&b.meta, &b.iterations);
    assert_eq!(ja, jb, "virtual-clock runs must replay identically");
}

#[test]
fn staleness_bound_enforced_under_jitter() {
    let mut cfg = base_config(4, 4, 60, ProtocolOverride::Auto);
    cfg.run.staleness = 2;
    cfg.sim.bwd_ns = vec![2_000, 2_000, 2_000, 2_000];
    cfg.sim.jitter = 0.8;
    let run = run_inproc::<f64>(&cfg).unwrap();
    let mut grants = 0;
    for log in &run.event_logs {
        for rec in log.records() {
            if let layercast_core::worker::events::EventKind::GrantObserved { min_stamp } =
                rec.kind
            {
                grants += 1;
                assert!(
                    rec.iter as i64 - min_stamp as i64 <= cfg.run.staleness as i64 + 1,
                    "grant at iter {} saw min stamp {}",
                    rec.iter,
                    min_stamp
                );
            }
        }
    }
    assert!(grants > 0, "no grants observed");
}
