//! A small reverse-mode training engine for feed-forward CNNs.
//!
//! Activations are laid out batch-first: dense inputs are `(batch, features)`
//! and image tensors are `(batch, height, width, channels)`, so the last mode
//! of every trainable layer's input is the dimension its weights consume.
//!
//! The forward pass is identical under both storage policies. What differs is
//! what gets kept for the backward pass: under [`StoragePolicy::Full`] each
//! trainable layer keeps its whole input, under [`StoragePolicy::LowRank`] it
//! keeps only the core `X x (U_0^T, .., U_{d-1}^T)`, and the weight gradient
//! is computed against the reconstruction `G x (U_0, .., U_{d-1})`. Frozen
//! layers keep nothing; layers above the lowest trainable one keep the ReLU
//! masks and pooling argmaxes needed to route activation gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use bitvec::vec::BitVec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::SubspaceBank;
use crate::tensor::{DenseMatrix, DenseTensor, TensorError};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum AutogradError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("no subspace bank entry for trainable layer {0}")]
    MissingBankEntry(usize),
    #[error("layer {layer}: batch of {got} does not match calibrated batch size {expected}")]
    BatchSizeMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("stored forward state does not belong to this network state")]
    StaleForward,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid step size {0}")]
    BadStepSize(f64),
}

type Result<T> = std::result::Result<T, AutogradError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        in_features: usize,
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    fn has_bias(&self) -> bool {
        match *self {
            LayerKind::Dense { bias, .. } | LayerKind::Conv2d { bias, .. } => bias,
            _ => false,
        }
    }

    /// `(rows, cols)` of the weight matrix; conv weights are
    /// `out_channels x (kernel * kernel * in_channels)` in `(kh, kw, c)` order.
    fn weight_shape(&self) -> Option<(usize, usize)> {
        match *self {
            LayerKind::Dense {
                in_features,
                out_features,
                ..
            } => Some((out_features, in_features)),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((out_channels, kernel * kernel * in_channels)),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerKind::Dense {
                in_features,
                out_features,
                ..
            } => {
                if input != [in_features] {
                    return Err(format!("dense expects [{in_features}], got {input:?}"));
                }
                Ok(vec![out_features])
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let [h, w, c] = image_dims(input)?;
                if c != in_channels {
                    return Err(format!("conv expects {in_channels} channels, got {c}"));
                }
                let ho = window_count(h + 2 * padding, kernel, stride)?;
                let wo = window_count(w + 2 * padding, kernel, stride)?;
                Ok(vec![ho, wo, out_channels])
            }
            LayerKind::MaxPool2d { kernel, stride } => {
                let [h, w, c] = image_dims(input)?;
                if kernel * kernel > 256 {
                    return Err("pool windows above 16x16 are unsupported".into());
                }
                Ok(vec![
                    window_count(h, kernel, stride)?,
                    window_count(w, kernel, stride)?,
                    c,
                ])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let positive = match *self {
            LayerKind::Dense {
                in_features,
                out_features,
                ..
            } => in_features > 0 && out_features > 0,
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => in_channels > 0 && out_channels > 0 && kernel > 0 && stride > 0,
            LayerKind::MaxPool2d { kernel, stride } => kernel > 0 && stride > 0,
            LayerKind::Relu | LayerKind::Flatten => true,
        };
        if positive {
            Ok(())
        } else {
            Err(format!("non-positive shape parameter in {self:?}"))
        }
    }
}

fn image_dims(input: &[usize]) -> std::result::Result<[usize; 3], String> {
    match input {
        &[h, w, c] => Ok([h, w, c]),
        _ => Err(format!("expected (height, width, channels), got {input:?}")),
    }
}

fn window_count(extent: usize, kernel: usize, stride: usize) -> std::result::Result<usize, String> {
    if extent < kernel {
        return Err(format!("kernel {kernel} larger than extent {extent}"));
    }
    Ok((extent - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub trainable: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self {
            kind,
            trainable: false,
        }
    }

    pub fn trainable(kind: LayerKind) -> Self {
        Self {
            kind,
            trainable: true,
        }
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        Self::new(LayerKind::Dense {
            in_features,
            out_features,
            bias: true,
        })
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::new(LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias: true,
        })
    }

    pub fn relu() -> Self {
        Self::new(LayerKind::Relu)
    }

    pub fn max_pool(kernel: usize, stride: usize) -> Self {
        Self::new(LayerKind::MaxPool2d { kernel, stride })
    }

    pub fn flatten() -> Self {
        Self::new(LayerKind::Flatten)
    }

    pub fn with_trainable(mut self, trainable: bool) -> Self {
        self.trainable = trainable;
        self
    }

    pub fn without_bias(mut self) -> Self {
        match &mut self.kind {
            LayerKind::Dense { bias, .. } | LayerKind::Conv2d { bias, .. } => *bias = false,
            _ => {}
        }
        self
    }
}

/// Weights (`out x fan_in`) and optional bias of a dense or conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: DenseMatrix,
    pub bias: Option<Vec<f64>>,
}

impl LayerParams {
    pub fn len(&self) -> usize {
        self.weight.data().len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().flatten().all(|v| v.is_finite())
    }
}

static NEXT_STATE: AtomicU64 = AtomicU64::new(1);

fn fresh_state() -> u64 {
    NEXT_STATE.fetch_add(1, Ordering::Relaxed)
}

/// Feed-forward network: layer list plus parameters of every dense/conv layer.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams>>,
    /// shapes[l] is the per-sample input shape of layer l; the last entry is the output.
    shapes: Vec<Vec<usize>>,
    state: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers && self.params == other.params
    }
}

impl Network {
    /// Builds a network with Glorot-uniform weights drawn from `seed` and zero biases.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers
            .iter()
            .map(|spec| init_params(&spec.kind, &mut rng))
            .collect();
        Self::from_parts(input_shape, layers, params)
    }

    /// Assembles a network from explicit parameters, validating every shape.
    pub fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: Vec<Option<LayerParams>>,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.len() > 3 || input_shape.contains(&0) {
            return Err(AutogradError::InvalidNetwork(format!(
                "input shape {input_shape:?} must have 1 to 3 positive extents"
            )));
        }
        if layers.is_empty() {
            return Err(AutogradError::InvalidNetwork("no layers".into()));
        }
        if params.len() != layers.len() {
            return Err(AutogradError::InvalidNetwork(format!(
                "{} parameter slots for {} layers",
                params.len(),
                layers.len()
            )));
        }
        let mut shapes = vec![input_shape.clone()];
        for (l, spec) in layers.iter().enumerate() {
            spec.kind
                .validate()
                .map_err(|msg| AutogradError::Shape { layer: l, msg })?;
            if spec.trainable && !spec.kind.has_params() {
                return Err(AutogradError::Shape {
                    layer: l,
                    msg: "only dense and conv layers can be trainable".into(),
                });
            }
            check_params(l, &spec.kind, params[l].as_ref())?;
            let next = spec
                .kind
                .output_shape(&shapes[l])
                .map_err(|msg| AutogradError::Shape { layer: l, msg })?;
            shapes.push(next);
        }
        if shapes.last().map(Vec::len) != Some(1) {
            return Err(AutogradError::InvalidNetwork(
                "network output must be a flat vector per sample".into(),
            ));
        }
        Ok(Self {
            input_shape,
            layers,
            params,
            shapes,
            state: fresh_state(),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().expect("validated")[0]
    }

    /// Per-sample input shape of layer `l` (index `layers().len()` gives the output shape).
    pub fn layer_input_shape(&self, l: usize) -> &[usize] {
        &self.shapes[l]
    }

    /// Full input dims of layer `l` for a batch of `batch` samples.
    pub fn batch_input_dims(&self, l: usize, batch: usize) -> Vec<usize> {
        std::iter::once(batch).chain(self.shapes[l].iter().copied()).collect()
    }

    pub fn params(&self, l: usize) -> Option<&LayerParams> {
        self.params.get(l).and_then(Option::as_ref)
    }

    /// Replaces the parameters of layer `l` (used for multi-head swaps).
    pub fn set_params(&mut self, l: usize, p: LayerParams) -> Result<()> {
        let kind = self.layers.get(l).map(|s| s.kind).ok_or_else(|| {
            AutogradError::InvalidNetwork(format!("no layer {l}"))
        })?;
        check_params(l, &kind, Some(&p))?;
        self.params[l] = Some(p);
        self.state = fresh_state();
        Ok(())
    }

    pub fn trainable_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&l| self.layers[l].trainable).collect()
    }

    pub fn lowest_trainable(&self) -> Option<usize> {
        self.layers.iter().position(|s| s.trainable)
    }

    /// Marks the last `k` parameterized layers trainable and freezes the rest.
    pub fn set_trainable_last(&mut self, k: usize) {
        let mut remaining = k;
        for spec in self.layers.iter_mut().rev() {
            spec.trainable = spec.kind.has_params() && remaining > 0;
            if spec.trainable {
                remaining -= 1;
            }
        }
        self.state = fresh_state();
    }

    pub fn set_trainable(&mut self, l: usize, trainable: bool) -> Result<()> {
        let spec = self
            .layers
            .get_mut(l)
            .ok_or_else(|| AutogradError::InvalidNetwork(format!("no layer {l}")))?;
        if trainable && !spec.kind.has_params() {
            return Err(AutogradError::Shape {
                layer: l,
                msg: "only dense and conv layers can be trainable".into(),
            });
        }
        spec.trainable = trainable;
        self.state = fresh_state();
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(LayerParams::len).sum()
    }

    fn check_batch(&self, batch: &DenseTensor) -> Result<usize> {
        if batch.order() != self.input_shape.len() + 1 || batch.dims()[1..] != self.input_shape[..] {
            return Err(AutogradError::Shape {
                layer: 0,
                msg: format!(
                    "batch dims {:?} do not match input shape {:?}",
                    batch.dims(),
                    self.input_shape
                ),
            });
        }
        Ok(batch.dims()[0])
    }

    /// Forward pass without storing anything.
    pub fn infer(&self, batch: &DenseTensor) -> Result<DenseMatrix> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for l in 0..self.layers.len() {
            x = self.layer_forward(l, &x, false)?.0;
        }
        to_logits(x)
    }

    /// Runs the network and returns the input tensor of every trainable layer.
    pub fn capture_trainable_inputs(&self, batch: &DenseTensor) -> Result<Vec<(usize, DenseTensor)>> {
        self.check_batch(batch)?;
        let top = self.trainable_layers().last().copied();
        let mut captured = Vec::new();
        let mut x = batch.clone();
        for l in 0..self.layers.len() {
            if Some(l) > top {
                break;
            }
            if self.layers[l].trainable {
                captured.push((l, x.clone()));
            }
            x = self.layer_forward(l, &x, false)?.0;
        }
        Ok(captured)
    }

    fn layer_forward(&self, l: usize, x: &DenseTensor, want_aux: bool) -> Result<(DenseTensor, Option<Auxiliary>)> {
        let spec = &self.layers[l];
        let batch = x.dims()[0];
        let out_dims = self.batch_input_dims(l + 1, batch);
        let err = |e: TensorError| AutogradError::Shape {
            layer: l,
            msg: e.to_string(),
        };
        match spec.kind {
            LayerKind::Dense { .. } => {
                let p = self.params[l].as_ref().expect("validated");
                let xm = DenseMatrix::new(batch, x.len() / batch, x.data().to_vec()).map_err(err)?;
                let mut y = xm.matmul_nt(&p.weight).map_err(err)?;
                add_bias(&mut y, p.bias.as_deref());
                Ok((DenseTensor::new(out_dims, y.into_data()).map_err(err)?, None))
            }
            LayerKind::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => {
                let p = self.params[l].as_ref().expect("validated");
                let cols = im2col(x, kernel, stride, padding);
                let mut y = cols.matmul_nt(&p.weight).map_err(err)?;
                add_bias(&mut y, p.bias.as_deref());
                Ok((DenseTensor::new(out_dims, y.into_data()).map_err(err)?, None))
            }
            LayerKind::Relu => {
                let mut y = x.clone();
                y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                let aux = want_aux.then(|| Auxiliary::ReluMask(x.data().iter().map(|&v| v > 0.0).collect()));
                Ok((y, aux))
            }
            LayerKind::MaxPool2d { kernel, stride } => {
                let (y, arg) = max_pool(x, &out_dims, kernel, stride);
                Ok((y, want_aux.then_some(Auxiliary::PoolArgmax(arg))))
            }
            LayerKind::Flatten => Ok((x.clone().reshape(out_dims).map_err(err)?, None)),
        }
    }
}

fn check_params(l: usize, kind: &LayerKind, p: Option<&LayerParams>) -> Result<()> {
    match (kind.weight_shape(), p) {
        (None, None) => Ok(()),
        (Some((r, c)), Some(p)) => {
            let bias_ok = match (&p.bias, kind.has_bias()) {
                (Some(b), true) => b.len() == r,
                (None, false) => true,
                _ => false,
            };
            if p.weight.rows() != r || p.weight.cols() != c || !bias_ok {
                return Err(AutogradError::Shape {
                    layer: l,
                    msg: format!("parameters do not match {kind:?}"),
                });
            }
            if !p.is_finite() {
                return Err(AutogradError::NonFinite("parameters"));
            }
            Ok(())
        }
        _ => Err(AutogradError::Shape {
            layer: l,
            msg: "parameter slot does not match layer kind".into(),
        }),
    }
}

/// Fresh Glorot-uniform weights and zero bias for `kind`, seeded.
pub fn init_layer_params(kind: &LayerKind, seed: u64) -> Option<LayerParams> {
    init_params(kind, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn init_params(kind: &LayerKind, rng: &mut ChaCha8Rng) -> Option<LayerParams> {
    let (rows, cols) = kind.weight_shape()?;
    let (fan_in, fan_out) = match *kind {
        LayerKind::Conv2d { kernel, out_channels, .. } => (cols, kernel * kernel * out_channels),
        _ => (cols, rows),
    };
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let weight = DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-a..a));
    let bias = kind.has_bias().then(|| vec![0.0; rows]);
    Some(LayerParams { weight, bias })
}

fn add_bias(y: &mut DenseMatrix, bias: Option<&[f64]>) {
    if let Some(b) = bias {
        let cols = y.cols();
        for row in y.data_mut().chunks_mut(cols) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
    }
}

fn to_logits(x: DenseTensor) -> Result<DenseMatrix> {
    let (b, k) = (x.dims()[0], x.dims()[1]);
    Ok(DenseMatrix::new(b, k, x.into_data())?)
}

/// Unrolls `(B, H, W, C)` into `(B * Ho * Wo) x (k * k * C)` patches, zero padded.
pub fn im2col(x: &DenseTensor, kernel: usize, stride: usize, padding: usize) -> DenseMatrix {
    let &[b, h, w, c] = x.dims() else {
        panic!("im2col expects an order-4 tensor");
    };
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let width = kernel * kernel * c;
    let mut cols = DenseMatrix::zeros(b * ho * wo, width);
    let src = x.data();
    let dst = cols.data_mut();
    for n in 0..b {
        for oh in 0..ho {
            for ow in 0..wo {
                let row = ((n * ho + oh) * wo + ow) * width;
                for kh in 0..kernel {
                    let ih = (oh * stride + kh) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..kernel {
                        let iw = (ow * stride + kw) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let s = ((n * h + ih as usize) * w + iw as usize) * c;
                        let d = row + (kh * kernel + kw) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im(cols: &DenseMatrix, dims: &[usize], kernel: usize, stride: usize, padding: usize) -> DenseTensor {
    let &[b, h, w, c] = dims else {
        panic!("col2im expects order-4 dims");
    };
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let width = kernel * kernel * c;
    let mut out = vec![0.0; b * h * w * c];
    let src = cols.data();
    for n in 0..b {
        for oh in 0..ho {
            for ow in 0..wo {
                let row = ((n * ho + oh) * wo + ow) * width;
                for kh in 0..kernel {
                    let ih = (oh * stride + kh) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..kernel {
                        let iw = (ow * stride + kw) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let d = ((n * h + ih as usize) * w + iw as usize) * c;
                        let s = row + (kh * kernel + kw) * c;
                        out[d..d + c].iter_mut().zip(&src[s..s + c]).for_each(|(o, v)| *o += v);
                    }
                }
            }
        }
    }
    DenseTensor::new(dims.to_vec(), out).expect("dims match buffer")
}

fn max_pool(x: &DenseTensor, out_dims: &[usize], kernel: usize, stride: usize) -> (DenseTensor, Vec<u8>) {
    let &[b, h, w, c] = x.dims() else {
        panic!("max_pool expects an order-4 tensor");
    };
    let (ho, wo) = (out_dims[1], out_dims[2]);
    let src = x.data();
    let mut out = vec![0.0; b * ho * wo * c];
    let mut arg = vec![0u8; out.len()];
    for n in 0..b {
        for oh in 0..ho {
            for ow in 0..wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0u8;
                    for kh in 0..kernel {
                        for kw in 0..kernel {
                            let v = src[((n * h + oh * stride + kh) * w + ow * stride + kw) * c + ch];
                            if v > best {
                                best = v;
                                best_at = (kh * kernel + kw) as u8;
                            }
                        }
                    }
                    let o = ((n * ho + oh) * wo + ow) * c + ch;
                    out[o] = best;
                    arg[o] = best_at;
                }
            }
        }
    }
    (DenseTensor::new(out_dims.to_vec(), out).expect("dims"), arg)
}

/// Where activations for the backward pass come from.
#[derive(Debug, Clone, Copy)]
pub enum StoragePolicy<'a> {
    /// Keep every trainable layer's full input.
    Full,
    /// Keep only the HOSVD core of each trainable layer's input.
    LowRank(&'a SubspaceBank),
}

/// What a trainable layer kept from its input.
#[derive(Debug, Clone)]
pub enum SavedActivation {
    Full(DenseTensor),
    Core(DenseTensor),
}

impl SavedActivation {
    pub fn len(&self) -> usize {
        match self {
            SavedActivation::Full(t) | SavedActivation::Core(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Routing information kept by non-trainable layers above the lowest trainable one.
#[derive(Debug, Clone)]
pub enum Auxiliary {
    /// One bit per input element: `x > 0`.
    ReluMask(BitVec),
    /// Winning position inside each pooling window, one byte per output element.
    PoolArgmax(Vec<u8>),
}

impl Auxiliary {
    pub fn len(&self) -> usize {
        match self {
            Auxiliary::ReluMask(m) => m.len(),
            Auxiliary::PoolArgmax(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bytes(&self) -> usize {
        match self {
            Auxiliary::ReluMask(m) => m.len().div_ceil(8),
            Auxiliary::PoolArgmax(a) => a.len(),
        }
    }
}

/// Everything a forward pass retained for the matching backward pass.
#[derive(Debug, Clone)]
pub struct StoredForward<'a> {
    state: u64,
    batch: usize,
    output_dims: Vec<usize>,
    saved: Vec<Option<SavedActivation>>,
    aux: Vec<Option<Auxiliary>>,
    bank: Option<&'a SubspaceBank>,
}

impl StoredForward<'_> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn saved(&self, l: usize) -> Option<&SavedActivation> {
        self.saved.get(l).and_then(Option::as_ref)
    }

    pub fn auxiliary(&self, l: usize) -> Option<&Auxiliary> {
        self.aux.get(l).and_then(Option::as_ref)
    }

    /// Elements held in saved activations (full inputs or cores).
    pub fn activation_elements(&self) -> usize {
        self.saved.iter().flatten().map(SavedActivation::len).sum()
    }

    /// Mask bits and argmax entries.
    pub fn aux_elements(&self) -> usize {
        self.aux.iter().flatten().map(Auxiliary::len).sum()
    }

    pub fn stored_elements(&self) -> usize {
        self.activation_elements() + self.aux_elements()
    }

    /// 8 bytes per saved activation element plus packed auxiliary bytes.
    pub fn stored_bytes(&self) -> usize {
        8 * self.activation_elements() + self.aux.iter().flatten().map(Auxiliary::bytes).sum::<usize>()
    }
}

/// Weight and bias gradients of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: DenseMatrix,
    pub bias: Option<Vec<f64>>,
}

/// Per-layer gradients; `None` for layers that were not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Option<LayerGrads>>,
}

impl Gradients {
    pub fn layer(&self, l: usize) -> Option<&LayerGrads> {
        self.layers.get(l).and_then(Option::as_ref)
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&l| self.layers[l].is_some()).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// All weights then biases of every layer, in layer order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for g in self.layers.iter().flatten() {
            v.extend_from_slice(g.weight.data());
            if let Some(b) = &g.bias {
                v.extend_from_slice(b);
            }
        }
        v
    }

    pub fn layer_flat(&self, l: usize) -> Option<Vec<f64>> {
        self.layer(l).map(|g| {
            let mut v = g.weight.data().to_vec();
            if let Some(b) = &g.bias {
                v.extend_from_slice(b);
            }
            v
        })
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// A gradient set of the same shape with `f` applied to each weight matrix.
    pub fn map_weights(&self, mut f: impl FnMut(usize, &DenseMatrix) -> DenseMatrix) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, g)| {
                    g.as_ref().map(|g| LayerGrads {
                        weight: f(l, &g.weight),
                        bias: g.bias.clone(),
                    })
                })
                .collect(),
        }
    }
}

/// Runs `batch` through `net`, keeping what `policy` asks for.
pub fn forward<'a>(
    net: &Network,
    batch: &DenseTensor,
    policy: StoragePolicy<'a>,
) -> Result<(DenseMatrix, StoredForward<'a>)> {
    let b = net.check_batch(batch)?;
    let lowest = net.lowest_trainable();
    let n = net.layers.len();
    let mut saved = vec![None; n];
    let mut aux = vec![None; n];
    let mut x = batch.clone();
    for l in 0..n {
        if net.layers[l].trainable {
            saved[l] = Some(match policy {
                StoragePolicy::Full => SavedActivation::Full(x.clone()),
                StoragePolicy::LowRank(bank) => {
                    let sub = bank.layer(l).ok_or(AutogradError::MissingBankEntry(l))?;
                    if sub.dims().len() != x.order() || sub.dims()[1..] != x.dims()[1..] {
                        return Err(AutogradError::Shape {
                            layer: l,
                            msg: format!("bank dims {:?} vs activation {:?}", sub.dims(), x.dims()),
                        });
                    }
                    if sub.dims()[0] != b {
                        return Err(AutogradError::BatchSizeMismatch {
                            layer: l,
                            expected: sub.dims()[0],
                            got: b,
                        });
                    }
                    SavedActivation::Core(sub.compress(&x)?)
                }
            });
        }
        let want_aux = matches!(lowest, Some(low) if l > low);
        let (y, a) = net.layer_forward(l, &x, want_aux)?;
        aux[l] = a;
        x = y;
    }
    let output_dims = x.dims().to_vec();
    let logits = to_logits(x)?;
    let bank = match policy {
        StoragePolicy::Full => None,
        StoragePolicy::LowRank(bank) => Some(bank),
    };
    Ok((
        logits,
        StoredForward {
            state: net.state,
            batch: b,
            output_dims,
            saved,
            aux,
            bank,
        },
    ))
}

/// Mean cross-entropy of `logits` against `labels` and its gradient.
pub fn cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> Result<(f64, DenseMatrix)> {
    let (b, k) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(AutogradError::Shape {
            layer: usize::MAX,
            msg: format!("{} labels for {b} logit rows", labels.len()),
        });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= k) {
        return Err(AutogradError::LabelOutOfRange { label, classes: k });
    }
    let mut grad = DenseMatrix::zeros(b, k);
    let mut loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let t = if j == y { 1.0 } else { 0.0 };
            grad.set(i, j, (p - t) * inv_b);
        }
    }
    Ok((loss * inv_b, grad))
}

/// `(1 / 2B) * ||pred - target||_F^2` and its gradient.
pub fn mse_loss(pred: &DenseMatrix, target: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    let diff = pred.sub(target)?;
    let b = pred.rows() as f64;
    let loss = 0.5 * diff.frobenius_dot(&diff) / b;
    Ok((loss, diff.scale(1.0 / b)))
}

/// Cross-entropy loss and weight gradients for a stored forward pass.
pub fn backward(
    net: &Network,
    stored: &StoredForward<'_>,
    logits: &DenseMatrix,
    labels: &[usize],
) -> Result<(f64, Gradients)> {
    if [logits.rows(), logits.cols()] != stored.output_dims[..] {
        return Err(AutogradError::StaleForward);
    }
    let (loss, dlogits) = cross_entropy(logits, labels)?;
    Ok((loss, backward_from_output_grad(net, stored, &dlogits)?))
}

/// Backpropagates an arbitrary output gradient.
pub fn backward_from_output_grad(
    net: &Network,
    stored: &StoredForward<'_>,
    dout: &DenseMatrix,
) -> Result<Gradients> {
    if stored.state != net.state || stored.saved.len() != net.layers.len() {
        return Err(AutogradError::StaleForward);
    }
    if [dout.rows(), dout.cols()] != stored.output_dims[..] {
        return Err(AutogradError::StaleForward);
    }
    let n = net.layers.len();
    let mut grads: Vec<Option<LayerGrads>> = vec![None; n];
    let Some(lowest) = net.lowest_trainable() else {
        return Ok(Gradients { layers: grads });
    };
    let b = stored.batch;
    let mut g = DenseTensor::new(stored.output_dims.clone(), dout.data().to_vec())?;
    for l in (lowest..n).rev() {
        let spec = &net.layers[l];
        let in_dims = net.batch_input_dims(l, b);
        let need_input_grad = l > lowest;
        let err = |e: TensorError| AutogradError::Shape {
            layer: l,
            msg: e.to_string(),
        };
        match spec.kind {
            LayerKind::Dense { .. } => {
                let p = net.params[l].as_ref().expect("validated");
                let out = p.weight.rows();
                let gm = DenseMatrix::new(b, out, g.into_data()).map_err(err)?;
                if spec.trainable {
                    let x = reconstruct_input(stored, l)?;
                    let xm = DenseMatrix::new(b, x.len() / b, x.into_data()).map_err(err)?;
                    grads[l] = Some(LayerGrads {
                        weight: gm.matmul_tn(&xm).map_err(err)?,
                        bias: p.bias.as_ref().map(|_| column_sums(&gm)),
                    });
                }
                if !need_input_grad {
                    break;
                }
                g = DenseTensor::new(in_dims, gm.matmul(&p.weight).map_err(err)?.into_data()).map_err(err)?;
            }
            LayerKind::Conv2d {
                kernel,
                stride,
                padding,
                out_channels,
                ..
            } => {
                let p = net.params[l].as_ref().expect("validated");
                let rows = g.len() / out_channels;
                let gm = DenseMatrix::new(rows, out_channels, g.into_data()).map_err(err)?;
                if spec.trainable {
                    let x = reconstruct_input(stored, l)?;
                    let cols = im2col(&x, kernel, stride, padding);
                    grads[l] = Some(LayerGrads {
                        weight: gm.matmul_tn(&cols).map_err(err)?,
                        bias: p.bias.as_ref().map(|_| column_sums(&gm)),
                    });
                }
                if !need_input_grad {
                    break;
                }
                let dcols = gm.matmul(&p.weight).map_err(err)?;
                g = col2im(&dcols, &in_dims, kernel, stride, padding);
            }
            LayerKind::Relu => {
                let Some(Auxiliary::ReluMask(mask)) = stored.auxiliary(l) else {
                    return Err(AutogradError::StaleForward);
                };
                if mask.len() != g.len() {
                    return Err(AutogradError::StaleForward);
                }
                for (v, keep) in g.data_mut().iter_mut().zip(mask.iter()) {
                    if !*keep {
                        *v = 0.0;
                    }
                }
            }
            LayerKind::MaxPool2d { kernel, stride } => {
                let Some(Auxiliary::PoolArgmax(arg)) = stored.auxiliary(l) else {
                    return Err(AutogradError::StaleForward);
                };
                g = unpool(&g, arg, &in_dims, kernel, stride).map_err(err)?;
            }
            LayerKind::Flatten => {
                g = g.reshape(in_dims).map_err(err)?;
            }
        }
    }
    Ok(Gradients { layers: grads })
}

fn reconstruct_input(stored: &StoredForward<'_>, l: usize) -> Result<DenseTensor> {
    match stored.saved(l) {
        Some(SavedActivation::Full(x)) => Ok(x.clone()),
        Some(SavedActivation::Core(core)) => {
            let sub = stored
                .bank
                .and_then(|bank| bank.layer(l))
                .ok_or(AutogradError::MissingBankEntry(l))?;
            Ok(sub.reconstruct(core)?)
        }
        None => Err(AutogradError::StaleForward),
    }
}

fn column_sums(m: &DenseMatrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for row in m.data().chunks(m.cols().max(1)) {
        s.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    s
}

fn unpool(
    g: &DenseTensor,
    arg: &[u8],
    in_dims: &[usize],
    kernel: usize,
    stride: usize,
) -> std::result::Result<DenseTensor, TensorError> {
    let &[b, h, w, c] = in_dims else {
        return Err(TensorError::ShapeMismatch("pool input must be order 4".into()));
    };
    let (ho, wo) = (g.dims()[1], g.dims()[2]);
    if arg.len() != g.len() {
        return Err(TensorError::ShapeMismatch("argmax length".into()));
    }
    let mut out = vec![0.0; b * h * w * c];
    let src = g.data();
    for n in 0..b {
        for oh in 0..ho {
            for ow in 0..wo {
                for ch in 0..c {
                    let o = ((n * ho + oh) * wo + ow) * c + ch;
                    let (kh, kw) = (arg[o] as usize / kernel, arg[o] as usize % kernel);
                    out[((n * h + oh * stride + kh) * w + ow * stride + kw) * c + ch] += src[o];
                }
            }
        }
    }
    DenseTensor::new(in_dims.to_vec(), out)
}

/// Plain SGD: returns a copy of `net` with `params - eta * grads`.
pub fn sgd_step(net: &Network, grads: &Gradients, eta: f64) -> Result<Network> {
    let mut next = net.clone();
    apply_sgd(&mut next, grads, eta)?;
    Ok(next)
}

/// In-place form of [`sgd_step`].
pub fn apply_sgd(net: &mut Network, grads: &Gradients, eta: f64) -> Result<()> {
    if !eta.is_finite() || eta < 0.0 {
        return Err(AutogradError::BadStepSize(eta));
    }
    if !grads.is_finite() {
        return Err(AutogradError::NonFinite("gradients"));
    }
    if grads.num_layers() != net.layers.len() {
        return Err(AutogradError::StaleForward);
    }
    for l in grads.layer_indices() {
        let g = grads.layer(l).expect("indexed");
        let p = net.params[l].as_mut().ok_or(AutogradError::StaleForward)?;
        if (g.weight.rows(), g.weight.cols()) != (p.weight.rows(), p.weight.cols()) {
            return Err(AutogradError::StaleForward);
        }
        p.weight
            .data_mut()
            .iter_mut()
            .zip(g.weight.data())
            .for_each(|(w, d)| *w -= eta * d);
        if let (Some(b), Some(db)) = (p.bias.as_mut(), g.bias.as_ref()) {
            b.iter_mut().zip(db).for_each(|(w, d)| *w -= eta * d);
        }
    }
    net.state = fresh_state();
    Ok(())
}
