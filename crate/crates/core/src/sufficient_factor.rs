//! Sufficient-factor gradient encoding, the three-way communication cost
//! model, and the per-layer protocol decision rule.
//!
//! An FC layer's batch gradient is a sum of K rank-one terms, one per sample:
//! the upstream error vector (length M) times the input activation (length
//! N). Shipping those vector pairs instead of the M x N matrix costs
//! K(M+N) floats per worker, independent of M*N.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{BackwardRecord, LayerKind, LayerProfile, LayerTensor};
use crate::scalar::Scalar;
use crate::tensor::{DenseMatrix, DenseVector};

/// How one layer's gradient travels each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Push the full gradient matrix to the server, pull full parameters.
    FullMatrixPs,
    /// Push factors to the server (which reconstructs), pull full parameters.
    SufficientFactorPs,
    /// Broadcast factors to every peer; each worker reconstructs and applies
    /// the update locally. No server involvement for the layer.
    SufficientFactorBroadcast,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::FullMatrixPs => "full-matrix-ps",
            Strategy::SufficientFactorPs => "sf-ps",
            Strategy::SufficientFactorBroadcast => "sf-broadcast",
        }
    }
}

/// One rank-one term of an FC gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair<S: Scalar> {
    /// Length M: spans gradient rows (upstream error side).
    pub row_factor: DenseVector<S>,
    /// Length N: spans gradient columns (input activation side).
    pub col_factor: DenseVector<S>,
}

/// Per-layer, per-batch collection of factor pairs reconstructing the
/// gradient as `scale * sum_k row_k col_kᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientFactorSet<S: Scalar> {
    pub layer_id: u16,
    pub clock: u32,
    pub worker_id: u16,
    pub pairs: Vec<FactorPair<S>>,
    /// Unscaled bias-gradient column (the extra pair's row factor; its column
    /// factor is the implicit [1]). Present iff the layer has a bias.
    pub bias: Option<DenseVector<S>>,
    /// Carries the 1/(K*P) normalization so reconstruction is exact.
    pub scale: S,
}

impl<S: Scalar> SufficientFactorSet<S> {
    pub fn rows(&self) -> Result<usize> {
        self.pairs
            .first()
            .map(|p| p.row_factor.len())
            .ok_or_else(|| Error::shape("factor set has no pairs"))
    }

    pub fn cols(&self) -> Result<usize> {
        self.pairs
            .first()
            .map(|p| p.col_factor.len())
            .ok_or_else(|| Error::shape("factor set has no pairs"))
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.rows()?;
        let n = self.cols()?;
        for p in &self.pairs {
            if p.row_factor.len() != m || p.col_factor.len() != n {
                return Err(Error::shape("ragged factor pair lengths"));
            }
        }
        if let Some(b) = &self.bias {
            if b.len() != m {
                return Err(Error::shape("bias factor length mismatch"));
            }
        }
        Ok(())
    }

    /// Scalars actually serialized for this set (factor entries plus the
    /// bias column; framing metadata excluded).
    pub fn float_count(&self) -> u64 {
        let per_pair = self
            .pairs
            .first()
            .map_or(0, |p| (p.row_factor.len() + p.col_factor.len()) as u64);
        per_pair * self.pairs.len() as u64 + self.bias.as_ref().map_or(0, |b| b.len() as u64)
    }
}

/// Extracts the factor pairs an FC backward step retained. The gradient
/// matrix is never formed here; the per-sample vectors are used directly.
pub fn decompose<S: Scalar>(record: &BackwardRecord<S>) -> Result<SufficientFactorSet<S>> {
    if record.kind != LayerKind::FullyConnected {
        return Err(Error::UnsupportedLayer(format!(
            "layer {} ({:?}) has no sufficient-factor form",
            record.layer_id, record.kind
        )));
    }
    let cap = record
        .factors
        .as_ref()
        .ok_or_else(|| Error::protocol("backward record did not retain per-sample factors"))?;
    let k = cap.out_errors.rows();
    let mut pairs = Vec::with_capacity(k);
    for s in 0..k {
        pairs.push(FactorPair {
            row_factor: DenseVector::from_vec(cap.out_errors.row(s).to_vec()),
            col_factor: DenseVector::from_vec(cap.in_activations.row(s).to_vec()),
        });
    }
    Ok(SufficientFactorSet {
        layer_id: record.layer_id,
        clock: 0,
        worker_id: 0,
        pairs,
        bias: cap.bias_sum.clone(),
        scale: cap.scale,
    })
}

/// `scale * sum_k row_k col_kᵀ`: the weight-gradient matrix. Terms accumulate
/// in pair order, matching the direct gradient computation bit for bit.
pub fn reconstruct<S: Scalar>(set: &SufficientFactorSet<S>) -> Result<DenseMatrix<S>> {
    set.validate()?;
    let mut out = DenseMatrix::zeros(set.rows()?, set.cols()?);
    for p in &set.pairs {
        out.add_outer(S::one(), p.row_factor.as_slice(), p.col_factor.as_slice())?;
    }
    out.scale_in_place(set.scale);
    Ok(out)
}

/// Weight gradient plus (scaled) bias gradient as one bundle, mirroring what
/// a full-matrix push would have carried.
pub fn reconstruct_tensor<S: Scalar>(set: &SufficientFactorSet<S>) -> Result<LayerTensor<S>> {
    let weights = reconstruct(set)?;
    let bias = set.bias.as_ref().map(|b| {
        let mut out = b.clone();
        for v in out.as_mut_slice() {
            *v = *v * set.scale;
        }
        out
    });
    Ok(LayerTensor { weights, bias })
}

/// Closed-form float counts for one FC layer, one iteration, cluster-wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CommCost {
    pub strategy: Strategy,
    pub floats: u64,
}

/// Communication cost model:
///
/// - full matrices via the server:      2*P*M*N
/// - factor broadcast, peer-to-peer:    (P-1)^2 * K * (M+N)
/// - factors via the server:            P*K*(M+N) + P*M*N
///
/// These closed forms drive both the decision rule and the benchmark tables.
/// Note the broadcast form undercounts measured unicast traffic, which is
/// P*(P-1)*K*(M+N) cluster-wide; the decision rule uses the closed form
/// above, and transports report measured floats separately so the difference
/// stays visible.
pub fn cost(strategy: Strategy, workers: u64, batch: u64, m: u64, n: u64) -> CommCost {
    let floats = match strategy {
        Strategy::FullMatrixPs => 2 * workers * m * n,
        Strategy::SufficientFactorBroadcast => (workers - 1).pow(2) * batch * (m + n),
        Strategy::SufficientFactorPs => workers * batch * (m + n) + workers * m * n,
    };
    CommCost { strategy, floats }
}

/// Per-layer protocol choice: non-FC layers always take the full-matrix
/// server path; FC layers compare the broadcast and server-factor closed
/// forms, preferring broadcast on ties.
pub fn sacp_decide(layer: &LayerProfile, workers: u64, batch: u64) -> Strategy {
    if layer.kind != LayerKind::FullyConnected {
        return Strategy::FullMatrixPs;
    }
    let (m, n) = (layer.m as u64, layer.n as u64);
    let broadcast = cost(Strategy::SufficientFactorBroadcast, workers, batch, m, n).floats;
    let via_server = cost(Strategy::SufficientFactorPs, workers, batch, m, n).floats;
    if broadcast <= via_server {
        Strategy::SufficientFactorBroadcast
    } else {
        Strategy::SufficientFactorPs
    }
}

/// Run-level protocol knob: pick per layer automatically, or force one
/// family. Forced factor strategies still route non-FC layers through the
/// full-matrix server path, since only FC gradients have a factor form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolOverride {
    Auto,
    FullPs,
    SfPs,
    Sfb,
}

impl Default for ProtocolOverride {
    fn default() -> Self {
        ProtocolOverride::Auto
    }
}

pub fn strategy_for(
    layer: &LayerProfile,
    protocol: ProtocolOverride,
    workers: u64,
    batch: u64,
) -> Strategy {
    let fc = layer.kind == LayerKind::FullyConnected;
    match protocol {
        ProtocolOverride::Auto => sacp_decide(layer, workers, batch),
        ProtocolOverride::FullPs => Strategy::FullMatrixPs,
        ProtocolOverride::SfPs if fc => Strategy::SufficientFactorPs,
        ProtocolOverride::Sfb if fc => Strategy::SufficientFactorBroadcast,
        _ => Strategy::FullMatrixPs,
    }
}

/// Per-layer strategy table for a whole model: None for fixed-function
/// layers, the chosen strategy for parameterized ones.
pub fn plan_strategies(
    profiles: &[LayerProfile],
    protocol: ProtocolOverride,
    workers: u64,
    batch: u64,
) -> Vec<Option<Strategy>> {
    profiles
        .iter()
        .map(|p| {
            matches!(p.kind, LayerKind::FullyConnected | LayerKind::Conv2d)
                .then(|| strategy_for(p, protocol, workers, batch))
        })
        .collect()
}
