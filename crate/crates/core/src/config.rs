//! Run configuration (TOML) and the static cluster manifest.
//!
//! One file describes a whole run: cluster shape, link shaping, dataset,
//! model, solver, simulation delays, and output paths. See
//! `configs/example.toml` in the repository root for an annotated example.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::comm::{LinkShape, PriorityPolicy};
use crate::error::{Error, Result};
use crate::network::ModelSpec;
use crate::solver::SolverConfig;
use crate::sufficient_factor::ProtocolOverride;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::F32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Inproc,
    Tcp,
}

impl Default for TransportKind {
    fn default() -> Self {
        TransportKind::Inproc
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    #[serde(default)]
    pub seed: u64,
    pub iters: u32,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_workers")]
    pub workers: u16,
    pub batch_size: usize,
    #[serde(default)]
    pub staleness: u32,
    #[serde(default)]
    pub protocol: ProtocolOverride,
    #[serde(default = "default_true")]
    pub dwbp: bool,
    #[serde(default)]
    pub transport: TransportKind,
}

fn default_workers() -> u16 {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct LinkSection {
    /// Bytes per second; 0 = unlimited.
    #[serde(default)]
    pub bandwidth: u64,
    #[serde(default)]
    pub latency_ms: f64,
    #[serde(default = "default_priority")]
    pub priority: PriorityPolicy,
}

fn default_priority() -> PriorityPolicy {
    PriorityPolicy::Fifo
}

impl LinkSection {
    pub fn shape(&self) -> LinkShape {
        LinkShape {
            bandwidth: self.bandwidth,
            latency_ms: self.latency_ms,
            priority: self.priority,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    pub source: DataSource,
    /// CIFAR-10 binary file or directory (cifar10 source).
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Keep only the first `limit` samples after loading.
    #[serde(default)]
    pub limit: Option<usize>,
    // Synthetic generator parameters.
    #[serde(default = "default_classes")]
    pub classes: u32,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_classes() -> u32 {
    4
}
fn default_dim() -> usize {
    16
}
fn default_n() -> usize {
    1024
}
fn default_margin() -> f64 {
    4.0
}

/// Injected compute delays for simulated runs (all zero by default).
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SimSection {
    #[serde(default)]
    pub fwd_ns: Vec<u64>,
    #[serde(default)]
    pub bwd_ns: Vec<u64>,
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct OutputSection {
    /// JSON-lines metrics stream (one record per iteration).
    #[serde(default)]
    pub metrics: Option<PathBuf>,
    /// Convergence curve CSV (iter, virtual time, loss).
    #[serde(default)]
    pub summary_csv: Option<PathBuf>,
    /// Per-worker event-log JSONL files go here.
    #[serde(default)]
    pub events_dir: Option<PathBuf>,
    /// Snapshot every node at this iteration boundary.
    #[serde(default)]
    pub checkpoint_at: Option<u32>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Resume every node from snapshots in this directory.
    #[serde(default)]
    pub restore_from: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(default)]
    pub link: LinkSection,
    pub data: DataSection,
    pub model: ModelSpec,
    pub solver: SolverConfig,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.run.workers == 0 {
            return Err(Error::config("need at least one worker"));
        }
        if self.run.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.run.iters == 0 {
            return Err(Error::config("iters must be positive"));
        }
        self.solver.validate()?;
        self.model.dims()?;
        if self.data.source == DataSource::Cifar10 && self.data.path.is_none() {
            return Err(Error::config("cifar10 source needs data.path"));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg: RunConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Static cluster membership for the TCP transport.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub server: ManifestEntry,
    pub workers: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Worker id (1-based); the server entry ignores it.
    #[serde(default)]
    pub id: u16,
    /// host:port to bind and be dialed at.
    pub addr: String,
}

impl Manifest {
    pub fn validate(&self, workers: u16) -> Result<()> {
        if self.workers.len() != workers as usize {
            return Err(Error::config(format!(
                "manifest lists {} workers, run expects {}",
                self.workers.len(),
                workers
            )));
        }
        for (i, w) in self.workers.iter().enumerate() {
            if w.id != (i + 1) as u16 {
                return Err(Error::config("manifest workers must be ids 1..=P in order"));
            }
        }
        Ok(())
    }

    /// Address of a node by id (0 = server).
    pub fn addr_of(&self, node: u16) -> &str {
        if node == 0 {
            &self.server.addr
        } else {
            &self.workers[(node - 1) as usize].addr
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_config() {
        let text = r#"
[run]
seed = 7
iters = 50
precision = "f64"
workers = 4
batch_size = 8
staleness = 1
protocol = "sf-ps"
dwbp = true
transport = "inproc"

[link]
bandwidth = 1000000
latency_ms = 0.5
priority = "upper_layers_first"

[data]
source = "synthetic"
classes = 3
dim = 12
n = 640
margin = 5.0

[model]
input = 12

[[model.layers]]
kind = "fully_connected"
out = 16

[[model.layers]]
kind = "relu"

[[model.layers]]
kind = "fully_connected"
out = 3
bias = false

[[model.layers]]
kind = "softmax_loss"

[solver]
epsilon = 0.05
momentum = 0.9
weight_decay = 0.0005
lr_policy = { kind = "fixed" }
total_iters = 50
"#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.run.workers, 4);
        assert_eq!(cfg.model.layers.len(), 4);
        assert_eq!(cfg.link.shape().latency_ns(), 500_000);
        assert_eq!(cfg.run.protocol, ProtocolOverride::SfPs);
    }

    #[test]
    fn image_input_and_conv_layers_parse() {
        let text = r#"
[run]
iters = 10
batch_size = 4

[data]
source = "synthetic"

[model]
input = { channels = 3, height = 8, width = 8 }

[[model.layers]]
kind = "conv2d"
out_channels = 4
kernel = 3
padding = 1

[[model.layers]]
kind = "max_pool"
size = 2
stride = 2

[[model.layers]]
kind = "relu"

[[model.layers]]
kind = "fully_connected"
out = 10

[[model.layers]]
kind = "softmax_loss"

[solver]
epsilon = 0.01
momentum = 0.9
weight_decay = 0.0
lr_policy = { kind = "step", gamma = 0.1, step_size = 5 }
total_iters = 10
"#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.classes().unwrap(), 10);
    }

    #[test]
    fn manifest_round_trip() {
        let text = r#"
[server]
addr = "127.0.0.1:7700"

[[workers]]
id = 1
addr = "127.0.0.1:7701"

[[workers]]
id = 2
addr = "127.0.0.1:7702"
"#;
        let m: Manifest = toml::from_str(text).unwrap();
        m.validate(2).unwrap();
        assert_eq!(m.addr_of(0), "127.0.0.1:7700");
        assert_eq!(m.addr_of(2), "127.0.0.1:7702");
        assert!(m.validate(3).is_err());
    }
}
