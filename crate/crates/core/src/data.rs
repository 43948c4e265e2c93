//! Dataset ingestion: the CIFAR-10 binary layout, a synthetic Gaussian
//! cluster generator, and deterministic batch selection.
//!
//! Batch selection is a pure function of (seed, iteration, worker): each
//! epoch is a seeded permutation of the dataset, split into global batches of
//! K*P samples that are dealt round-robin across workers by position. The
//! union of all P workers' batches at iteration t is exactly the single-
//! process batch of K*P samples, independent of P.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::DenseMatrix;

/// CIFAR-10 binary record: 1 label byte + 3 x 32 x 32 channel-major pixels.
pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_DIM: usize = 3072;
pub const CIFAR_CLASSES: u32 = 10;

#[derive(Debug, Clone)]
pub struct Dataset<S: Scalar> {
    /// n x dim feature matrix.
    pub features: DenseMatrix<S>,
    pub labels: Vec<u32>,
    pub classes: u32,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Keeps the first `n` samples.
    pub fn truncated(mut self, n: usize) -> Self {
        if n >= self.len() {
            return self;
        }
        let dim = self.dim();
        let data = self.features.as_slice()[..n * dim].to_vec();
        self.features = DenseMatrix::from_vec(n, dim, data).expect("valid truncation");
        self.labels.truncate(n);
        self
    }
}

#[derive(Debug, Clone)]
pub struct DataBatch<S: Scalar> {
    pub inputs: DenseMatrix<S>,
    pub labels: Vec<u32>,
}

/// splitmix64-style mixer for deriving independent seeds.
pub fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn parse_cifar_bytes<S: Scalar>(bytes: &[u8], source: &str) -> Result<(Vec<S>, Vec<u32>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{source}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut features = Vec::with_capacity(n * CIFAR_DIM);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as u32;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!(
                "{source}: label byte {label} out of range"
            )));
        }
        labels.push(label);
        features.extend(rec[1..].iter().map(|&b| S::from_f64_lossy(b as f64 / 255.0)));
    }
    Ok((features, labels))
}

/// Loads CIFAR-10 binary data from one `.bin` file or a directory of them
/// (read in sorted filename order). Pixels are scaled to [0, 1].
pub fn load_cifar10<S: Scalar>(path: &Path) -> Result<Dataset<S>> {
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "bin") {
                files.push(p);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(Error::Format(format!(
                "no .bin files under {}",
                path.display()
            )));
        }
    } else {
        files.push(path.to_path_buf());
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        let bytes = std::fs::read(file)?;
        let (f, l) = parse_cifar_bytes::<S>(&bytes, &file.display().to_string())?;
        features.extend(f);
        labels.extend(l);
    }
    let n = labels.len();
    Ok(Dataset {
        features: DenseMatrix::from_vec(n, CIFAR_DIM, features)?,
        labels,
        classes: CIFAR_CLASSES,
    })
}

/// Seeded Gaussian class clusters: class c's mean is `margin` times a random
/// unit direction; samples add unit-variance noise. Large margins make the
/// classes linearly separable, so tiny models can provably fit the data.
pub fn synth_dataset<S: Scalar>(
    classes: u32,
    dim: usize,
    n: usize,
    seed: u64,
    margin: f64,
) -> Result<Dataset<S>> {
    if n == 0 {
        return Err(Error::config("synthetic dataset size must be positive"));
    }
    if classes < 2 || dim == 0 {
        return Err(Error::config("need >= 2 classes and a positive dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed, 0x5741));
    let mut means = Vec::with_capacity(classes as usize);
    for _ in 0..classes {
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut dir {
            *v *= margin / norm;
        }
        means.push(dir);
    }
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = (i as u32) % classes;
        labels.push(c);
        let mean = &means[c as usize];
        for &m in mean {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(S::from_f64_lossy(m + noise));
        }
    }
    Ok(Dataset {
        features: DenseMatrix::from_vec(n, dim, features)?,
        labels,
        classes,
    })
}

/// Synthetic images in the CIFAR-10 binary record format: per-class random
/// pixel means with additive pixel noise, clipped to bytes, plus an optional
/// fraction of uniformly flipped labels (an irreducible loss floor). A
/// stand-in corpus for desk-scale runs where the real files are unavailable.
pub fn synth_cifar10_records_with(
    n: usize,
    seed: u64,
    noise_sigma: f64,
    label_flip: f64,
) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed, 0xC1FA));
    let means: Vec<Vec<f64>> = (0..CIFAR_CLASSES)
        .map(|_| (0..CIFAR_DIM).map(|_| rng.gen_range(40.0..215.0)).collect())
        .collect();
    let mut out = Vec::with_capacity(n * CIFAR_RECORD);
    for i in 0..n {
        let c = (i as u32) % CIFAR_CLASSES;
        let label = if rng.gen::<f64>() < label_flip {
            rng.gen_range(0..CIFAR_CLASSES)
        } else {
            c
        };
        out.push(label as u8);
        let mean = &means[c as usize];
        for &m in mean {
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * noise_sigma;
            out.push((m + noise).clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn synth_cifar10_records(n: usize, seed: u64) -> Vec<u8> {
    synth_cifar10_records_with(n, seed, 25.0, 0.0)
}

/// Seeded Fisher-Yates permutation of 0..n for one epoch; identical on every
/// worker so shards stay disjoint and exhaustive.
fn epoch_permutation(n: usize, seed: u64, epoch: u32) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..n as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed, 0xE0 ^ epoch as u64));
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Iterations per epoch for a global batch of `global_batch` samples
/// (remainder samples are skipped).
pub fn iters_per_epoch(dataset_len: usize, global_batch: usize) -> Result<u32> {
    if global_batch == 0 || global_batch > dataset_len {
        return Err(Error::config(format!(
            "global batch {global_batch} exceeds dataset size {dataset_len}"
        )));
    }
    Ok((dataset_len / global_batch) as u32)
}

/// Worker `worker`'s K-sample batch for 1-based iteration `iter`.
///
/// Within the epoch's permutation, the global batch occupies one contiguous
/// block of K*P positions; position j goes to worker (j mod P) + 1.
pub fn batch_for<S: Scalar>(
    ds: &Dataset<S>,
    seed: u64,
    iter: u32,
    worker: u16,
    workers: u16,
    k: usize,
) -> Result<DataBatch<S>> {
    let p = workers as usize;
    let global = k * p;
    let ipe = iters_per_epoch(ds.len(), global)?;
    let epoch = (iter - 1) / ipe;
    let slot = ((iter - 1) % ipe) as usize;
    let perm = epoch_permutation(ds.len(), seed, epoch);
    let base = slot * global;
    let dim = ds.dim();
    let mut data = Vec::with_capacity(k * dim);
    let mut labels = Vec::with_capacity(k);
    for j in 0..k {
        let pos = base + (worker as usize - 1) + j * p;
        let sample = perm[pos] as usize;
        data.extend_from_slice(ds.features.row(sample));
        labels.push(ds.labels[sample]);
    }
    Ok(DataBatch {
        inputs: DenseMatrix::from_vec(k, dim, data)?,
        labels,
    })
}

/// The union batch a single process with batch K*P sees at `iter`, in
/// permutation order.
pub fn union_batch_for<S: Scalar>(
    ds: &Dataset<S>,
    seed: u64,
    iter: u32,
    global_batch: usize,
) -> Result<DataBatch<S>> {
    batch_for(ds, seed, iter, 1, 1, global_batch)
}
