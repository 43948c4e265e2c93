//! Versioned binary snapshots: model parameters, solver velocity, and the
//! iteration cursor, integrity-checked and bound to the model configuration.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "LCKP" | version u16 | role u8 | scalar width u8
//! worker u16 | workers u16 | next_iter u32 | completed u64 | seed u64
//! config digest [32]
//! layer count u16, then per layer:
//!   layer_id u16 | has_params u8 | params tensor | velocity tensor
//! sha256 of everything above [32]
//! ```
//!
//! Tensors serialize as rows u32, cols u32, weights, bias flag u8,
//! then bias length u32 + data when flagged.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{LayerTensor, ModelSpec, ModelState};
use crate::scalar::Scalar;
use crate::solver::SolverConfig;
use crate::tensor::{DenseMatrix, DenseVector};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Role {
    Worker = 0,
    Server = 1,
}

/// State a node resumes from at an iteration boundary.
#[derive(Debug, Clone)]
pub struct WorkerSnapshot<S: Scalar> {
    /// The iteration the node will run next.
    pub next_iter: u32,
    pub model: ModelState<S>,
    pub velocity: ModelState<S>,
}

/// Header fields, readable without deserializing tensors.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckpointMeta {
    pub version: u16,
    pub role: u8,
    pub scalar_width: u8,
    pub worker: u16,
    pub workers: u16,
    pub next_iter: u32,
    pub completed: u64,
    pub seed: u64,
    pub digest_hex: String,
    pub checksum_ok: bool,
    pub params_layers: u16,
}

/// Fingerprint binding a snapshot to its model and solver configuration.
pub fn config_digest(spec: &ModelSpec, solver: &SolverConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(spec).expect("spec serializes"));
    h.update(serde_json::to_string(solver).expect("solver serializes"));
    h.finalize().into()
}

fn put_tensor<S: Scalar>(out: &mut Vec<u8>, t: &LayerTensor<S>) {
    out.extend_from_slice(&(t.weights.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.weights.cols() as u32).to_le_bytes());
    for &v in t.weights.as_slice() {
        v.write_le(out);
    }
    match &t.bias {
        Some(b) => {
            out.push(1);
            out.extend_from_slice(&(b.len() as u32).to_le_bytes());
            for &v in b.as_slice() {
                v.write_le(out);
            }
        }
        None => out.push(0),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("snapshot truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn scalars<S: Scalar>(&mut self, n: usize) -> Result<Vec<S>> {
        let raw = self.take(n * S::WIRE_WIDTH)?;
        Ok(raw
            .chunks_exact(S::WIRE_WIDTH)
            .map(|c| S::read_le(c))
            .collect())
    }
    fn tensor<S: Scalar>(&mut self) -> Result<LayerTensor<S>> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let weights = DenseMatrix::from_vec(rows, cols, self.scalars(rows * cols)?)?;
        let bias = if self.u8()? != 0 {
            let len = self.u32()? as usize;
            Some(DenseVector::from_vec(self.scalars(len)?))
        } else {
            None
        };
        Ok(LayerTensor { weights, bias })
    }
}

/// Serializes a snapshot; `digest` comes from [`config_digest`].
pub fn encode_snapshot<S: Scalar>(
    role: Role,
    worker: u16,
    workers: u16,
    seed: u64,
    digest: &[u8; 32],
    snap: &WorkerSnapshot<S>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(role as u8);
    out.push(S::WIRE_WIDTH as u8);
    out.extend_from_slice(&worker.to_le_bytes());
    out.extend_from_slice(&workers.to_le_bytes());
    out.extend_from_slice(&snap.next_iter.to_le_bytes());
    out.extend_from_slice(&((snap.next_iter - 1) as u64).to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(digest);

    let layers: Vec<u16> = snap.model.parameterized_layers().collect();
    out.extend_from_slice(&(layers.len() as u16).to_le_bytes());
    for layer in layers {
        out.extend_from_slice(&layer.to_le_bytes());
        out.push(1);
        put_tensor(&mut out, snap.model.layer(layer).expect("parameterized"));
        put_tensor(&mut out, snap.velocity.layer(layer).expect("parameterized"));
    }

    let sum: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&sum);
    out
}

pub fn write_snapshot<S: Scalar>(
    path: &Path,
    role: Role,
    worker: u16,
    workers: u16,
    seed: u64,
    digest: &[u8; 32],
    snap: &WorkerSnapshot<S>,
) -> Result<()> {
    std::fs::write(path, encode_snapshot(role, worker, workers, seed, digest, snap))?;
    Ok(())
}

fn verify_checksum(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 32 {
        return Err(Error::Checksum("snapshot shorter than its checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 32);
    let sum: [u8; 32] = Sha256::digest(body).into();
    if sum != tail {
        return Err(Error::Checksum("snapshot checksum mismatch".into()));
    }
    Ok(body)
}

/// Restores a snapshot into a skeleton cloned from freshly initialized
/// state (so layer structure comes from the spec, parameters from the file).
pub fn read_snapshot<S: Scalar>(
    path: &Path,
    spec: &ModelSpec,
    expected_digest: &[u8; 32],
) -> Result<(Role, u16, WorkerSnapshot<S>)> {
    let bytes = std::fs::read(path)?;
    let body = verify_checksum(&bytes)?;
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a snapshot file".into()));
    }
    if r.u16()? != CHECKPOINT_VERSION {
        return Err(Error::Format("unsupported snapshot version".into()));
    }
    let role = match r.u8()? {
        0 => Role::Worker,
        1 => Role::Server,
        other => return Err(Error::Format(format!("unknown role {other}"))),
    };
    let width = r.u8()?;
    if width as usize != S::WIRE_WIDTH {
        return Err(Error::Format(format!(
            "snapshot precision is {width}-byte scalars"
        )));
    }
    let worker = r.u16()?;
    let _workers = r.u16()?;
    let next_iter = r.u32()?;
    let _completed = r.u64()?;
    let _seed = r.u64()?;
    let digest = r.take(32)?;
    if digest != expected_digest {
        return Err(Error::Config(
            "snapshot was taken under a different model/solver configuration".into(),
        ));
    }

    let mut model = crate::network::init_params::<S>(spec, 0)?;
    let mut velocity = model.zeros_like();
    let count = r.u16()?;
    for _ in 0..count {
        let layer = r.u16()?;
        let has = r.u8()?;
        if has == 0 {
            continue;
        }
        let params = r.tensor::<S>()?;
        let vel = r.tensor::<S>()?;
        let slot = model
            .layer(layer)
            .ok_or_else(|| Error::Format(format!("layer {layer} not parameterized in spec")))?;
        if !slot.same_shape(&params) {
            return Err(Error::Config(format!(
                "layer {layer} shape differs from the current model"
            )));
        }
        model.set_layer(layer, params);
        velocity.set_layer(layer, vel);
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes in snapshot".into()));
    }
    Ok((
        role,
        worker,
        WorkerSnapshot {
            next_iter,
            model,
            velocity,
        },
    ))
}

/// Header + integrity summary without requiring the matching config.
pub fn inspect(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path)?;
    let checksum_ok = verify_checksum(&bytes).is_ok();
    let body = if checksum_ok {
        &bytes[..bytes.len() - 32]
    } else {
        &bytes[..]
    };
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a snapshot file".into()));
    }
    let version = r.u16()?;
    let role = r.u8()?;
    let scalar_width = r.u8()?;
    let worker = r.u16()?;
    let workers = r.u16()?;
    let next_iter = r.u32()?;
    let completed = r.u64()?;
    let seed = r.u64()?;
    let digest = r.take(32)?;
    let params_layers = r.u16()?;
    Ok(CheckpointMeta {
        version,
        role,
        scalar_width,
        worker,
        workers,
        next_iter,
        completed,
        seed,
        digest_hex: digest.iter().map(|b| format!("{b:02x}")).collect(),
        checksum_ok,
        params_layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, InputShape, LayerSpec};
    use crate::solver::LrPolicy;

    fn spec() -> ModelSpec {
        ModelSpec {
            input: InputShape::Flat(4),
            layers: vec![
                LayerSpec::FullyConnected { out: 3, bias: true },
                LayerSpec::SoftmaxLoss,
            ],
        }
    }

    fn solver() -> SolverConfig {
        SolverConfig {
            epsilon: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_policy: LrPolicy::Fixed,
            total_iters: 50,
        }
    }

    #[test]
    fn snapshot_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w1.ckpt");
        let spec = spec();
        let digest = config_digest(&spec, &solver());
        let model = init_params::<f32>(&spec, 99).unwrap();
        let snap = WorkerSnapshot {
            next_iter: 11,
            model: model.clone(),
            velocity: model.zeros_like(),
        };
        write_snapshot(&path, Role::Worker, 1, 1, 42, &digest, &snap).unwrap();
        let (role, worker, back) = read_snapshot::<f32>(&path, &spec, &digest).unwrap();
        assert_eq!(role, Role::Worker);
        assert_eq!(worker, 1);
        assert_eq!(back.next_iter, 11);
        assert_eq!(back.model, snap.model);
        assert_eq!(back.velocity, snap.velocity);
    }

    #[test]
    fn corrupt_snapshot_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w1.ckpt");
        let spec = spec();
        let digest = config_digest(&spec, &solver());
        let model = init_params::<f32>(&spec, 1).unwrap();
        let snap = WorkerSnapshot {
            next_iter: 2,
            model: model.clone(),
            velocity: model.zeros_like(),
        };
        let mut bytes = encode_snapshot(Role::Worker, 1, 1, 0, &digest, &snap);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_snapshot::<f32>(&path, &spec, &digest),
            Err(Error::Checksum(_))
        ));
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w1.ckpt");
        let spec_a = spec();
        let digest_a = config_digest(&spec_a, &solver());
        let model = init_params::<f32>(&spec_a, 1).unwrap();
        let snap = WorkerSnapshot {
            next_iter: 2,
            model: model.clone(),
            velocity: model.zeros_like(),
        };
        write_snapshot(&path, Role::Worker, 1, 1, 0, &digest_a, &snap).unwrap();

        let spec_b = ModelSpec {
            input: InputShape::Flat(5),
            layers: vec![
                LayerSpec::FullyConnected { out: 3, bias: true },
                LayerSpec::SoftmaxLoss,
            ],
        };
        let digest_b = config_digest(&spec_b, &solver());
        assert!(matches!(
            read_snapshot::<f32>(&path, &spec_b, &digest_b),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn inspect_reads_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w1.ckpt");
        let spec = spec();
        let digest = config_digest(&spec, &solver());
        let model = init_params::<f64>(&spec, 1).unwrap();
        let snap = WorkerSnapshot {
            next_iter: 7,
            model: model.clone(),
            velocity: model.zeros_like(),
        };
        write_snapshot(&path, Role::Server, 0, 4, 5, &digest, &snap).unwrap();
        let meta = inspect(&path).unwrap();
        assert_eq!(meta.role, 1);
        assert_eq!(meta.scalar_width, 8);
        assert_eq!(meta.next_iter, 7);
        assert_eq!(meta.completed, 6);
        assert!(meta.checksum_ok);
        assert_eq!(meta.params_layers, 1);
    }
}
