//! Layered feed-forward model with explicit per-layer backward records.
//!
//! Layers are numbered 1..=L from the bottom; the topmost layer is always the
//! softmax cross-entropy loss. Backward runs strictly top-down and yields one
//! immutable [`BackwardRecord`] per layer, so per-layer communication can be
//! launched while lower layers are still computing.
//!
//! Error messages passed between layers are per-sample loss gradients of the
//! batch *sum*; parameter gradients fold in the `1/(K*P)` normalization via
//! `grad_scale`, which makes a worker's pushed gradient combine across P
//! workers into the mean gradient over the union batch.

pub mod conv;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{DenseMatrix, DenseVector};
use conv::{ConvGeometry, FeatShape, PoolGeometry};

/// Layer taxonomy; only `FullyConnected` and `Conv2d` carry parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    FullyConnected,
    Relu,
    Conv2d,
    MaxPool,
    SoftmaxLoss,
}

/// Declarative per-layer configuration (the on-disk model schema).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    FullyConnected {
        out: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Relu,
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    SoftmaxLoss,
}

fn default_true() -> bool {
    true
}
fn default_stride() -> usize {
    1
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::FullyConnected { .. } => LayerKind::FullyConnected,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerSpec::MaxPool { .. } => LayerKind::MaxPool,
            LayerSpec::SoftmaxLoss => LayerKind::SoftmaxLoss,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::FullyConnected { .. } | LayerSpec::Conv2d { .. }
        )
    }
}

/// Input activation shape: a flat feature vector or a channel-major image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputShape {
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl InputShape {
    fn feat(&self) -> FeatShape {
        match *self {
            InputShape::Flat(d) => FeatShape::flat(d),
            InputShape::Image {
                channels,
                height,
                width,
            } => FeatShape {
                channels,
                height,
                width,
            },
        }
    }
}

/// Whole-model declarative configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

/// Resolved geometry for one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerDims {
    pub in_shape: FeatShape,
    pub out_shape: FeatShape,
}

/// Static per-layer metadata driving protocol decisions and the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerProfile {
    /// 1-based index from the bottom.
    pub layer_id: u16,
    pub kind: LayerKind,
    /// Output dimension: weight-matrix rows for parameterized layers,
    /// flattened activation length otherwise.
    pub m: usize,
    /// Input dimension: weight-matrix columns for parameterized layers.
    pub n: usize,
    pub param_count: usize,
    pub flop_estimate: u64,
}

impl ModelSpec {
    /// Resolves per-layer shapes, validating adjacency and the topmost loss.
    pub fn dims(&self) -> Result<Vec<LayerDims>> {
        if self.layers.is_empty() {
            return Err(Error::config("model has no layers"));
        }
        if self.layers.last().unwrap().kind() != LayerKind::SoftmaxLoss {
            return Err(Error::config("topmost layer must be softmax_loss"));
        }
        let mut dims = Vec::with_capacity(self.layers.len());
        let mut cur = self.input.feat();
        if cur.is_empty() {
            return Err(Error::config("input shape must be non-empty"));
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            if layer.kind() == LayerKind::SoftmaxLoss && idx + 1 != self.layers.len() {
                return Err(Error::config("softmax_loss only allowed at the top"));
            }
            let out = match layer {
                LayerSpec::FullyConnected { out, .. } => {
                    if *out == 0 {
                        return Err(Error::config("fully_connected out must be positive"));
                    }
                    FeatShape::flat(*out)
                }
                LayerSpec::Relu => cur,
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let geom = ConvGeometry {
                        in_shape: cur,
                        out_channels: *out_channels,
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                    };
                    geom.out_shape().ok_or_else(|| {
                        Error::config(format!("conv2d layer {} has invalid geometry", idx + 1))
                    })?
                }
                LayerSpec::MaxPool { size, stride } => {
                    let geom = PoolGeometry {
                        in_shape: cur,
                        size: *size,
                        stride: *stride,
                    };
                    geom.out_shape().ok_or_else(|| {
                        Error::config(format!("max_pool layer {} has invalid geometry", idx + 1))
                    })?
                }
                LayerSpec::SoftmaxLoss => {
                    if cur.len() < 2 {
                        return Err(Error::config("softmax_loss needs >= 2 classes"));
                    }
                    cur
                }
            };
            if out.is_empty() {
                return Err(Error::config(format!("layer {} has empty output", idx + 1)));
            }
            dims.push(LayerDims {
                in_shape: cur,
                out_shape: out,
            });
            cur = out;
        }
        Ok(dims)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Class count: the flattened input width of the loss layer.
    pub fn classes(&self) -> Result<usize> {
        let dims = self.dims()?;
        Ok(dims.last().unwrap().in_shape.len())
    }

    pub fn profiles(&self) -> Result<Vec<LayerProfile>> {
        let dims = self.dims()?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, (layer, d)) in self.layers.iter().zip(dims.iter()).enumerate() {
            let (m, n, params, flops) = match layer {
                LayerSpec::FullyConnected { out, bias } => {
                    let (m, n) = (*out, d.in_shape.len());
                    (
                        m,
                        n,
                        m * n + if *bias { m } else { 0 },
                        2 * m as u64 * n as u64,
                    )
                }
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    let n = d.in_shape.channels * kernel * kernel;
                    let m = *out_channels;
                    let positions = (d.out_shape.height * d.out_shape.width) as u64;
                    (
                        m,
                        n,
                        m * n + if *bias { m } else { 0 },
                        2 * m as u64 * n as u64 * positions,
                    )
                }
                LayerSpec::Relu => (
                    d.out_shape.len(),
                    d.in_shape.len(),
                    0,
                    d.in_shape.len() as u64,
                ),
                LayerSpec::MaxPool { size, .. } => (
                    d.out_shape.len(),
                    d.in_shape.len(),
                    0,
                    (d.out_shape.len() * size * size) as u64,
                ),
                LayerSpec::SoftmaxLoss => (
                    d.out_shape.len(),
                    d.in_shape.len(),
                    0,
                    5 * d.in_shape.len() as u64,
                ),
            };
            out.push(LayerProfile {
                layer_id: (idx + 1) as u16,
                kind: layer.kind(),
                m,
                n,
                param_count: params,
                flop_estimate: flops,
            });
        }
        Ok(out)
    }

    /// Stable fingerprint used to reject checkpoints from a different model.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("spec serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().into()
    }
}

/// Weights plus optional bias for one parameterized layer; also the body of
/// full-matrix wire payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensor<S: Scalar> {
    pub weights: DenseMatrix<S>,
    pub bias: Option<DenseVector<S>>,
}

impl<S: Scalar> LayerTensor<S> {
    pub fn zeros_like(other: &Self) -> Self {
        LayerTensor {
            weights: DenseMatrix::zeros(other.weights.rows(), other.weights.cols()),
            bias: other.bias.as_ref().map(|b| DenseVector::zeros(b.len())),
        }
    }

    pub fn float_count(&self) -> u64 {
        self.weights.len() as u64 + self.bias.as_ref().map_or(0, |b| b.len() as u64)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.weights.same_shape(&other.weights)
            && self.bias.as_ref().map(|b| b.len()) == other.bias.as_ref().map(|b| b.len())
    }

    /// `self += alpha * other`, elementwise over weights and bias.
    pub fn axpy_into(&mut self, alpha: S, other: &Self) -> Result<()> {
        self.weights.axpy_into(alpha, &other.weights)?;
        match (&mut self.bias, &other.bias) {
            (Some(b), Some(o)) => {
                for (y, &x) in b.as_mut_slice().iter_mut().zip(o.as_slice()) {
                    *y = *y + alpha * x;
                }
            }
            (None, None) => {}
            _ => return Err(Error::shape("bias presence mismatch")),
        }
        Ok(())
    }

    pub fn max_rel_diff(&self, other: &Self) -> f64 {
        let mut worst = self.weights.max_rel_diff(&other.weights);
        if let (Some(a), Some(b)) = (&self.bias, &other.bias) {
            for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
                let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
                worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1.0));
            }
        }
        worst
    }
}

/// All trainable parameters; entry i-1 holds layer i's tensors (None for
/// fixed-function layers).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<S: Scalar> {
    layers: Vec<Option<LayerTensor<S>>>,
}

impl<S: Scalar> ModelState<S> {
    pub fn layer(&self, layer_id: u16) -> Option<&LayerTensor<S>> {
        self.layers[(layer_id - 1) as usize].as_ref()
    }

    pub fn layer_mut(&mut self, layer_id: u16) -> Option<&mut LayerTensor<S>> {
        self.layers[(layer_id - 1) as usize].as_mut()
    }

    pub fn set_layer(&mut self, layer_id: u16, tensor: LayerTensor<S>) {
        self.layers[(layer_id - 1) as usize] = Some(tensor);
    }

    pub fn parameterized_layers(&self) -> impl Iterator<Item = u16> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.as_ref().map(|_| (i + 1) as u16))
    }

    /// Zero-filled buffers mirroring every parameter shape (momentum state).
    pub fn zeros_like(&self) -> Self {
        ModelState {
            layers: self
                .layers
                .iter()
                .map(|l| l.as_ref().map(LayerTensor::zeros_like))
                .collect(),
        }
    }

    pub fn max_rel_diff(&self, other: &Self) -> f64 {
        let mut worst = 0.0f64;
        for (a, b) in self.layers.iter().zip(other.layers.iter()) {
            if let (Some(a), Some(b)) = (a, b) {
                worst = worst.max(a.max_rel_diff(b));
            }
        }
        worst
    }
}

/// Deterministic uniform initialization in [-r, r] with r = sqrt(6/(M+N))
/// per parameterized layer; biases start at zero. The same seed always
/// produces bit-identical state.
pub fn init_params<S: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ModelState<S>> {
    use rand::{Rng, SeedableRng};
    let profiles = spec.profiles()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (layer, prof) in spec.layers.iter().zip(profiles.iter()) {
        if !layer.has_params() {
            layers.push(None);
            continue;
        }
        let (m, n) = (prof.m, prof.n);
        let r = (6.0 / (m + n) as f64).sqrt();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m * n {
            let v: f64 = rng.gen::<f64>() * 2.0 * r - r;
            data.push(S::from_f64_lossy(v));
        }
        let with_bias = match layer {
            LayerSpec::FullyConnected { bias, .. } | LayerSpec::Conv2d { bias, .. } => *bias,
            _ => false,
        };
        layers.push(Some(LayerTensor {
            weights: DenseMatrix::from_vec(m, n, data)?,
            bias: with_bias.then(|| DenseVector::zeros(m)),
        }));
    }
    Ok(ModelState { layers })
}

/// Per-layer activations for one batch: `activations[0]` is the input,
/// `activations[i]` the output of layer i. The loss layer's output row holds
/// class probabilities. Immutable once produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<S: Scalar> {
    pub activations: Vec<DenseMatrix<S>>,
    pub labels: Vec<u32>,
    pub loss: S,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn batch_size(&self) -> usize {
        self.activations[0].rows()
    }
}

/// Computes layer `layer_id`'s output from the partial activation stack
/// (which must hold exactly the layers below) and appends it. Returns the
/// mean batch loss when the layer is the loss layer.
///
/// Workers call this one layer at a time so each layer's forward can be
/// gated on that layer's parameters being fresh.
pub fn forward_layer<S: Scalar>(
    spec: &ModelSpec,
    dims: &[LayerDims],
    state: &ModelState<S>,
    activations: &mut Vec<DenseMatrix<S>>,
    labels: &[u32],
    layer_id: u16,
) -> Result<Option<S>> {
    let idx = (layer_id - 1) as usize;
    if activations.len() != idx + 1 {
        return Err(Error::protocol(format!(
            "forward out of order: layer {} with {} activations",
            layer_id,
            activations.len()
        )));
    }
    let layer = &spec.layers[idx];
    let d = &dims[idx];
    let k = activations[0].rows();
    let x = &activations[idx];
    let mut y = DenseMatrix::zeros(k, d.out_shape.len());
    let mut loss_sum = S::zero();
    match layer {
        LayerSpec::FullyConnected { .. } => {
            let t = state.layers[idx].as_ref().expect("fc has params");
            for s in 0..k {
                let xs = x.row(s);
                let ys = y.row_mut(s);
                for (m, out) in ys.iter_mut().enumerate() {
                    let w = t.weights.row(m);
                    let mut acc = S::zero();
                    for (wv, xv) in w.iter().zip(xs.iter()) {
                        acc = acc + *wv * *xv;
                    }
                    if let Some(b) = &t.bias {
                        acc = acc + b.as_slice()[m];
                    }
                    *out = acc;
                }
            }
        }
        LayerSpec::Relu => {
            for (o, &v) in y.as_mut_slice().iter_mut().zip(x.as_slice()) {
                *o = if v > S::zero() { v } else { S::zero() };
            }
        }
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let t = state.layers[idx].as_ref().expect("conv has params");
            let geom = ConvGeometry {
                in_shape: d.in_shape,
                out_channels: *out_channels,
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
            };
            let positions = d.out_shape.height * d.out_shape.width;
            for s in 0..k {
                let col = conv::im2col(x.row(s), &geom);
                let prod = t.weights.matmul(&col)?;
                let ys = y.row_mut(s);
                for ch in 0..*out_channels {
                    let b = t
                        .bias
                        .as_ref()
                        .map(|b| b.as_slice()[ch])
                        .unwrap_or(S::zero());
                    for pidx in 0..positions {
                        ys[ch * positions + pidx] = prod.get(ch, pidx) + b;
                    }
                }
            }
        }
        LayerSpec::MaxPool { size, stride } => {
            let geom = PoolGeometry {
                in_shape: d.in_shape,
                size: *size,
                stride: *stride,
            };
            for s in 0..k {
                conv::maxpool_forward(x.row(s), &geom, y.row_mut(s));
            }
        }
        LayerSpec::SoftmaxLoss => {
            // log-sum-exp softmax: probabilities out, mean NLL as loss.
            for s in 0..k {
                let xs = x.row(s);
                let mut mx = xs[0];
                for &v in xs {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = S::zero();
                for &v in xs {
                    sum = sum + (v - mx).exp();
                }
                let lse = mx + sum.ln();
                loss_sum = loss_sum + (lse - xs[labels[s] as usize]);
                let ys = y.row_mut(s);
                for (o, &v) in ys.iter_mut().zip(xs.iter()) {
                    *o = (v - lse).exp();
                }
            }
        }
    }
    if !y.all_finite() {
        return Err(Error::shape(format!(
            "layer {} produced non-finite activations",
            layer_id
        )));
    }
    activations.push(y);
    Ok((layer.kind() == LayerKind::SoftmaxLoss).then(|| loss_sum / S::from_f64_lossy(k as f64)))
}

/// Forward pass over a batch (rows = samples, flattened channel-major).
/// Returns per-layer activations and the mean loss.
pub fn forward<S: Scalar>(
    spec: &ModelSpec,
    state: &ModelState<S>,
    inputs: &DenseMatrix<S>,
    labels: &[u32],
) -> Result<ForwardTrace<S>> {
    let dims = spec.dims()?;
    check_batch(&dims, inputs, labels)?;
    let mut activations = Vec::with_capacity(spec.layers.len() + 1);
    activations.push(inputs.clone());
    let mut loss = S::zero();
    for layer_id in 1..=spec.layers.len() as u16 {
        if let Some(l) = forward_layer(spec, &dims, state, &mut activations, labels, layer_id)? {
            loss = l;
        }
    }
    Ok(ForwardTrace {
        activations,
        labels: labels.to_vec(),
        loss,
    })
}

/// Validates a batch against the model's input geometry and class count.
pub fn check_batch<S: Scalar>(
    dims: &[LayerDims],
    inputs: &DenseMatrix<S>,
    labels: &[u32],
) -> Result<()> {
    if inputs.cols() != dims[0].in_shape.len() {
        return Err(Error::shape(format!(
            "batch width {} does not match input shape {}",
            inputs.cols(),
            dims[0].in_shape.len()
        )));
    }
    if inputs.rows() != labels.len() {
        return Err(Error::shape("label count does not match batch size"));
    }
    let classes = dims.last().unwrap().in_shape.len();
    for &l in labels {
        if (l as usize) >= classes {
            return Err(Error::shape(format!(
                "label {} out of range ({})",
                l, classes
            )));
        }
    }
    Ok(())
}

/// Per-sample factors retained by FC backward so the gradient can be shipped
/// as vector pairs instead of a full matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SfCapture<S: Scalar> {
    /// K rows, layer output dim: upstream error per sample.
    pub out_errors: DenseMatrix<S>,
    /// K rows, layer input dim: forward input activation per sample.
    pub in_activations: DenseMatrix<S>,
    /// Unscaled bias gradient (column sums of `out_errors`) when bias is on.
    pub bias_sum: Option<DenseVector<S>>,
    /// Normalization applied to reconstructed sums: 1/(K*P).
    pub scale: S,
}

/// Everything layer i's backward step produces: the (scaled) parameter
/// gradient, the outgoing error message for layer i-1, and for FC layers the
/// per-sample factors. Immutable once created.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardRecord<S: Scalar> {
    pub layer_id: u16,
    pub kind: LayerKind,
    pub grad: Option<LayerTensor<S>>,
    /// Error message E_i handed to the layer below (input-dim, K rows);
    /// None for the bottom layer.
    pub down_error: Option<DenseMatrix<S>>,
    pub factors: Option<SfCapture<S>>,
}

/// Top-down backward pass. `layer()` must be called with L, L-1, ..., 1;
/// out-of-order invocation is a protocol error.
///
/// The model state is passed per call rather than held: once a layer's error
/// message has been emitted, updating that layer's parameters (as overlapped
/// communication does) cannot affect the layers still to come. Parameters are
/// never mutated here.
pub struct BackwardPass<'a, S: Scalar> {
    spec: &'a ModelSpec,
    trace: &'a ForwardTrace<S>,
    dims: Vec<LayerDims>,
    grad_scale: S,
    expected: u16,
    upstream: Option<DenseMatrix<S>>,
}

impl<'a, S: Scalar> BackwardPass<'a, S> {
    /// `grad_scale` is the factor applied to raw per-sample gradient sums,
    /// normally `1/(K*P)`.
    pub fn new(spec: &'a ModelSpec, trace: &'a ForwardTrace<S>, grad_scale: S) -> Result<Self> {
        let dims = spec.dims()?;
        Ok(BackwardPass {
            spec,
            trace,
            dims,
            grad_scale,
            expected: spec.layers.len() as u16,
            upstream: None,
        })
    }

    pub fn next_layer(&self) -> Option<u16> {
        (self.expected >= 1).then_some(self.expected)
    }

    /// Runs backward for `layer_id`, which must be the next layer top-down.
    pub fn layer(&mut self, state: &ModelState<S>, layer_id: u16) -> Result<BackwardRecord<S>> {
        if layer_id != self.expected || self.expected == 0 {
            return Err(Error::protocol(format!(
                "backward out of order: got layer {}, expected {}",
                layer_id, self.expected
            )));
        }
        let record = backward_layer(
            self.spec,
            &self.dims,
            state,
            self.trace,
            layer_id,
            self.upstream.take(),
            self.grad_scale,
        )?;
        self.expected -= 1;
        self.upstream = record.down_error.clone();
        Ok(record)
    }
}

/// Backward step for one layer. `upstream` is the error message emitted by
/// the layer above (None only for the topmost layer).
pub fn backward_layer<S: Scalar>(
    spec: &ModelSpec,
    dims: &[LayerDims],
    state: &ModelState<S>,
    trace: &ForwardTrace<S>,
    layer_id: u16,
    upstream: Option<DenseMatrix<S>>,
    grad_scale: S,
) -> Result<BackwardRecord<S>> {
    let idx = (layer_id - 1) as usize;
    let d = dims[idx];
    let k = trace.batch_size();
    let x = &trace.activations[idx];
    let layer = &spec.layers[idx];
    let mut upstream = upstream;
    let mut take_upstream = || -> Result<DenseMatrix<S>> {
        upstream
            .take()
            .ok_or_else(|| Error::protocol("missing upstream error message"))
    };

    let record = match layer {
        LayerSpec::SoftmaxLoss => {
            let probs = &trace.activations[idx + 1];
            let mut delta = probs.clone();
            for s in 0..k {
                let y = trace.labels[s] as usize;
                let row = delta.row_mut(s);
                row[y] = row[y] - S::one();
            }
            BackwardRecord {
                layer_id,
                kind: LayerKind::SoftmaxLoss,
                grad: None,
                down_error: (layer_id > 1).then_some(delta),
                factors: None,
            }
        }
        LayerSpec::FullyConnected { bias, .. } => {
            let delta = take_upstream()?;
            let t = state.layers[idx].as_ref().expect("fc has params");
            let (m, n) = (t.weights.rows(), t.weights.cols());

            let mut grad_w = DenseMatrix::zeros(m, n);
            for s in 0..k {
                grad_w.add_outer(S::one(), delta.row(s), x.row(s))?;
            }
            grad_w.scale_in_place(grad_scale);

            let bias_sum = bias.then(|| {
                let mut b = DenseVector::zeros(m);
                for s in 0..k {
                    for (acc, &dv) in b.as_mut_slice().iter_mut().zip(delta.row(s)) {
                        *acc = *acc + dv;
                    }
                }
                b
            });
            let grad_b = bias_sum.as_ref().map(|bsum| {
                let mut b = bsum.clone();
                for v in b.as_mut_slice() {
                    *v = *v * grad_scale;
                }
                b
            });

            let mut down = DenseMatrix::zeros(k, n);
            for s in 0..k {
                let drow = delta.row(s);
                let out = down.row_mut(s);
                for (mi, &dv) in drow.iter().enumerate() {
                    if dv == S::zero() {
                        continue;
                    }
                    for (o, &w) in out.iter_mut().zip(t.weights.row(mi)) {
                        *o = *o + dv * w;
                    }
                }
            }

            BackwardRecord {
                layer_id,
                kind: LayerKind::FullyConnected,
                grad: Some(LayerTensor {
                    weights: grad_w,
                    bias: grad_b,
                }),
                down_error: (layer_id > 1).then_some(down),
                factors: Some(SfCapture {
                    out_errors: delta,
                    in_activations: x.clone(),
                    bias_sum,
                    scale: grad_scale,
                }),
            }
        }
        LayerSpec::Relu => {
            let delta = take_upstream()?;
            let mut down = DenseMatrix::zeros(k, d.in_shape.len());
            for ((o, &dv), &xv) in down
                .as_mut_slice()
                .iter_mut()
                .zip(delta.as_slice())
                .zip(x.as_slice())
            {
                *o = if xv > S::zero() { dv } else { S::zero() };
            }
            BackwardRecord {
                layer_id,
                kind: LayerKind::Relu,
                grad: None,
                down_error: (layer_id > 1).then_some(down),
                factors: None,
            }
        }
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
            bias,
        } => {
            let delta = take_upstream()?;
            let t = state.layers[idx].as_ref().expect("conv has params");
            let geom = ConvGeometry {
                in_shape: d.in_shape,
                out_channels: *out_channels,
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
            };
            let positions = d.out_shape.height * d.out_shape.width;
            let w_t = t.weights.transpose();

            let mut grad_w = DenseMatrix::zeros(t.weights.rows(), t.weights.cols());
            let mut grad_b = bias.then(|| DenseVector::zeros(*out_channels));
            let mut down = DenseMatrix::zeros(k, d.in_shape.len());
            for s in 0..k {
                let delta_s =
                    DenseMatrix::from_vec(*out_channels, positions, delta.row(s).to_vec())?;
                let col = conv::im2col(x.row(s), &geom);
                // grad += delta_s colᵀ, accumulated sample-ascending.
                let contrib = delta_s.matmul(&col.transpose())?;
                grad_w.axpy_into(S::one(), &contrib)?;
                if let Some(b) = grad_b.as_mut() {
                    for ch in 0..*out_channels {
                        let mut acc = S::zero();
                        for p in 0..positions {
                            acc = acc + delta_s.get(ch, p);
                        }
                        b.as_mut_slice()[ch] = b.as_mut_slice()[ch] + acc;
                    }
                }
                let down_col = w_t.matmul(&delta_s)?;
                conv::col2im_add(&down_col, &geom, down.row_mut(s));
            }
            grad_w.scale_in_place(grad_scale);
            if let Some(b) = grad_b.as_mut() {
                for v in b.as_mut_slice() {
                    *v = *v * grad_scale;
                }
            }
            BackwardRecord {
                layer_id,
                kind: LayerKind::Conv2d,
                grad: Some(LayerTensor {
                    weights: grad_w,
                    bias: grad_b,
                }),
                down_error: (layer_id > 1).then_some(down),
                factors: None,
            }
        }
        LayerSpec::MaxPool { size, stride } => {
            let delta = take_upstream()?;
            let geom = PoolGeometry {
                in_shape: d.in_shape,
                size: *size,
                stride: *stride,
            };
            let mut down = DenseMatrix::zeros(k, d.in_shape.len());
            for s in 0..k {
                conv::maxpool_backward(x.row(s), delta.row(s), &geom, down.row_mut(s));
            }
            BackwardRecord {
                layer_id,
                kind: LayerKind::MaxPool,
                grad: None,
                down_error: (layer_id > 1).then_some(down),
                factors: None,
            }
        }
    };

    Ok(record)
}

/// Convenience: full backward top-down, records ordered top layer first.
pub fn backward_all<S: Scalar>(
    spec: &ModelSpec,
    state: &ModelState<S>,
    trace: &ForwardTrace<S>,
    grad_scale: S,
) -> Result<Vec<BackwardRecord<S>>> {
    let mut pass = BackwardPass::new(spec, trace, grad_scale)?;
    let mut records = Vec::with_capacity(spec.layers.len());
    for layer_id in (1..=spec.layers.len() as u16).rev() {
        records.push(pass.layer(state, layer_id)?);
    }
    Ok(records)
}
