//! `layercast` command-line interface: training runs, standalone cluster
//! roles, the communication-cost benchmark, and snapshot inspection.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use layercast_core::comm::TrafficLedger;
use layercast_core::config::{self, Precision, RunConfig, TransportKind};
use layercast_core::harness;
use layercast_core::scalar::Scalar;
use layercast_core::sim::ClusterNode;
use layercast_core::sufficient_factor::ProtocolOverride;
use layercast_core::tcp;
use layercast_core::worker::checkpoint;

#[derive(Parser)]
#[command(
    name = "layercast",
    about = "Data-parallel SGD over a stale-synchronous parameter server with \
             per-layer communication strategies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Auto,
    FullPs,
    SfPs,
    Sfb,
}

impl From<ProtocolArg> for ProtocolOverride {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Auto => ProtocolOverride::Auto,
            ProtocolArg::FullPs => ProtocolOverride::FullPs,
            ProtocolArg::SfPs => ProtocolOverride::SfPs,
            ProtocolArg::Sfb => ProtocolOverride::Sfb,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SwitchArg {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Tcp,
}

#[derive(Args)]
struct Overrides {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Cluster manifest (required for the tcp transport).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    workers: Option<u16>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    staleness: Option<u32>,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    #[arg(long, value_enum)]
    dwbp: Option<SwitchArg>,
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    /// Link budget in bytes/second (0 = unlimited).
    #[arg(long)]
    bandwidth: Option<u64>,
    #[arg(long)]
    latency_ms: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<u32>,
    /// JSON-lines metrics output path.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

impl Overrides {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = config::load_config(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(v) = self.workers {
            cfg.run.workers = v;
        }
        if let Some(v) = self.batch_size {
            cfg.run.batch_size = v;
        }
        if let Some(v) = self.staleness {
            cfg.run.staleness = v;
        }
        if let Some(v) = self.protocol {
            cfg.run.protocol = v.into();
        }
        if let Some(v) = self.dwbp {
            cfg.run.dwbp = matches!(v, SwitchArg::On);
        }
        if let Some(v) = self.transport {
            cfg.run.transport = match v {
                TransportArg::Inproc => TransportKind::Inproc,
                TransportArg::Tcp => TransportKind::Tcp,
            };
        }
        if let Some(v) = self.bandwidth {
            cfg.link.bandwidth = v;
        }
        if let Some(v) = self.latency_ms {
            cfg.link.latency_ms = v;
        }
        if let Some(v) = self.seed {
            cfg.run.seed = v;
        }
        if let Some(v) = self.iters {
            cfg.run.iters = v;
            cfg.solver.total_iters = cfg.solver.total_iters.max(v);
        }
        if let Some(v) = &self.metrics_out {
            cfg.output.metrics = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a full training job (spawns the whole cluster).
    Train(Overrides),
    /// Run the parameter-server role from a manifest.
    Server {
        #[command(flatten)]
        common: Overrides,
        /// Write the final server state as a snapshot.
        #[arg(long)]
        snapshot_out: Option<PathBuf>,
    },
    /// Run one worker role from a manifest.
    Worker {
        #[command(flatten)]
        common: Overrides,
        /// 1-based worker id.
        #[arg(long)]
        id: u16,
        /// Iteration report stream (JSON lines); defaults to stdout.
        #[arg(long)]
        report_out: Option<PathBuf>,
        /// Event-log output (JSON lines).
        #[arg(long)]
        events_out: Option<PathBuf>,
    },
    /// Emit the communication-cost table as CSV.
    BenchComm {
        #[arg(long, default_value_t = 2)]
        p_min: u64,
        #[arg(long, default_value_t = 64)]
        p_max: u64,
        /// Comma-separated batch sizes.
        #[arg(long, default_value = "32,256", value_delimiter = ',')]
        k: Vec<u64>,
        #[arg(long, default_value_t = 4096)]
        m: u64,
        #[arg(long, default_value_t = 4096)]
        n: u64,
        /// CSV output path; defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a snapshot file's header and integrity status.
    CheckpointInspect { path: PathBuf },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Train(common) => {
            let cfg = common.load()?;
            match cfg.run.transport {
                TransportKind::Inproc => {
                    let summary = harness::train(&cfg)?;
                    println!("{}", serde_json::to_string_pretty(&summary)?);
                }
                TransportKind::Tcp => {
                    let manifest_path = common
                        .manifest
                        .as_ref()
                        .context("tcp transport needs --manifest")?;
                    let manifest = config::load_manifest(manifest_path)?;
                    match cfg.run.precision {
                        Precision::F32 => run_tcp_train::<f32>(&cfg, &manifest)?,
                        Precision::F64 => run_tcp_train::<f64>(&cfg, &manifest)?,
                    }
                }
            }
        }
        Command::Server {
            common,
            snapshot_out,
        } => {
            let cfg = common.load()?;
            let manifest_path = common.manifest.as_ref().context("server needs --manifest")?;
            let manifest = config::load_manifest(manifest_path)?;
            manifest.validate(cfg.run.workers)?;
            match cfg.run.precision {
                Precision::F32 => run_server_role::<f32>(&cfg, &manifest, snapshot_out)?,
                Precision::F64 => run_server_role::<f64>(&cfg, &manifest, snapshot_out)?,
            }
        }
        Command::Worker {
            common,
            id,
            report_out,
            events_out,
        } => {
            let cfg = common.load()?;
            if id == 0 || id > cfg.run.workers {
                bail!("worker id {} out of range 1..={}", id, cfg.run.workers);
            }
            let manifest_path = common.manifest.as_ref().context("worker needs --manifest")?;
            let manifest = config::load_manifest(manifest_path)?;
            manifest.validate(cfg.run.workers)?;
            match cfg.run.precision {
                Precision::F32 => run_worker_role::<f32>(&cfg, &manifest, id, report_out, events_out)?,
                Precision::F64 => run_worker_role::<f64>(&cfg, &manifest, id, report_out, events_out)?,
            }
        }
        Command::BenchComm {
            p_min,
            p_max,
            k,
            m,
            n,
            out,
        } => {
            if p_min < 2 || p_max < p_min {
                bail!("need 2 <= p_min <= p_max");
            }
            let ps: Vec<u64> = (p_min..=p_max).collect();
            let rows = harness::bench_comm(&ps, &k, m, n)?;
            let csv = harness::bench_comm_csv(&rows);
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::CheckpointInspect { path } => {
            let meta = checkpoint::inspect(&path)?;
            println!("{}", serde_json::to_string_pretty(&meta)?);
        }
    }
    Ok(())
}

fn run_tcp_train<S: Scalar>(cfg: &RunConfig, manifest: &config::Manifest) -> anyhow::Result<()> {
    let run = harness::train_tcp::<S>(cfg, manifest)?;
    harness::write_outputs(cfg, &run)?;
    let summary = harness::TrainSummary {
        iters: cfg.run.iters,
        final_loss: run.losses.last().copied().unwrap_or(f64::NAN),
        virtual_ns: run.virtual_ns,
        total_bytes: run.ledger.total_bytes(),
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn bind_listener(addr: &str) -> anyhow::Result<std::net::TcpListener> {
    std::net::TcpListener::bind(addr).with_context(|| format!("binding {addr}"))
}

fn run_server_role<S: Scalar>(
    cfg: &RunConfig,
    manifest: &config::Manifest,
    snapshot_out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let node = harness::build_role::<S>(cfg, 0)?;
    let listener = bind_listener(manifest.addr_of(0))?;
    let ledger = TrafficLedger::new();
    let node = tcp::run_role(
        node,
        0,
        cfg.run.workers,
        manifest,
        cfg.link.shape(),
        ledger.clone(),
        listener,
    )?;
    let ClusterNode::Server(server) = node else {
        bail!("role mismatch");
    };
    if let Some(path) = snapshot_out {
        let digest = checkpoint::config_digest(&cfg.model, &cfg.solver);
        checkpoint::write_snapshot(
            &path,
            checkpoint::Role::Server,
            0,
            cfg.run.workers,
            cfg.run.seed,
            &digest,
            &server.snapshot(cfg.run.iters + 1),
        )?;
    }
    eprintln!(
        "server finished at clock {} ({} bytes moved)",
        server.min_clock(),
        ledger.total_bytes()
    );
    Ok(())
}

fn run_worker_role<S: Scalar>(
    cfg: &RunConfig,
    manifest: &config::Manifest,
    id: u16,
    report_out: Option<PathBuf>,
    events_out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let node = harness::build_role::<S>(cfg, id)?;
    let listener = bind_listener(manifest.addr_of(id))?;
    let ledger = TrafficLedger::new();
    let node = tcp::run_role(
        node,
        id,
        cfg.run.workers,
        manifest,
        cfg.link.shape(),
        ledger,
        listener,
    )?;
    let ClusterNode::Worker(worker) = node else {
        bail!("role mismatch");
    };
    let mut reports = String::new();
    for rep in worker.reports() {
        reports.push_str(&serde_json::to_string(rep)?);
        reports.push('\n');
    }
    match report_out {
        Some(path) => std::fs::write(path, reports)?,
        None => print!("{reports}"),
    }
    if let Some(path) = events_out {
        std::fs::write(path, worker.event_log().to_jsonl())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_train_flags() {
        let cli = Cli::try_parse_from([
            "layercast",
            "train",
            "--config",
            "run.toml",
            "--workers",
            "4",
            "--batch-size",
            "16",
            "--staleness",
            "1",
            "--protocol",
            "sf-ps",
            "--dwbp",
            "off",
            "--transport",
            "inproc",
            "--bandwidth",
            "1000000",
            "--latency-ms",
            "0.5",
            "--seed",
            "9",
            "--iters",
            "100",
            "--metrics-out",
            "m.jsonl",
        ])
        .unwrap();
        let Command::Train(ov) = cli.command else {
            panic!("expected train");
        };
        assert_eq!(ov.workers, Some(4));
        assert!(matches!(ov.protocol, Some(ProtocolArg::SfPs)));
        assert!(matches!(ov.dwbp, Some(SwitchArg::Off)));
        assert_eq!(ov.bandwidth, Some(1_000_000));
        assert_eq!(ov.iters, Some(100));
    }

    #[test]
    fn parses_bench_comm_lists() {
        let cli = Cli::try_parse_from([
            "layercast",
            "bench-comm",
            "--p-min",
            "2",
            "--p-max",
            "8",
            "--k",
            "32,256",
            "--m",
            "4096",
            "--n",
            "4096",
        ])
        .unwrap();
        let Command::BenchComm { k, .. } = cli.command else {
            panic!("expected bench-comm");
        };
        assert_eq!(k, vec![32, 256]);
    }
}
