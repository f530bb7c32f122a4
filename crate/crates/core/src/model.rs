//! Floating-point network descriptions: conv1d/linear/ReLU chains with
//! optional batch normalization after conv layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpu::ActivationSign;

/// Convolution layers default to 10-bit codes.
pub const CONV_MODE_M: u32 = 10;
/// Linear layers default to 5-bit codes.
pub const LINEAR_MODE_M: u32 = 5;
/// Class ids are 0..=9.
pub const MAX_CLASSES: u32 = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },
    #[error("layer {layer}: batch-norm channel {channel} has non-positive variance + eps")]
    BadBNParams { layer: usize, channel: usize },
    #[error("layer {layer}: batch norm is only supported after conv1d layers")]
    UnsupportedLayer { layer: usize },
    #[error("class count {0} outside 1..=10")]
    BadClassCount(u32),
    #[error("model has no layers")]
    Empty,
    #[error("input scale must be finite and positive, got {0}")]
    BadInputScale(f32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv1d { kernel: u32, stride: u32 },
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: u32,
    pub out_channels: u32,
    pub activation: Activation,
    /// Weight code width.
    pub mode_m: u32,
    /// Weights per static-table line.
    pub n: u32,
}

impl LayerSpec {
    pub fn conv1d(in_channels: u32, out_channels: u32, kernel: u32, stride: u32) -> Self {
        Self {
            kind: LayerKind::Conv1d { kernel, stride },
            in_channels,
            out_channels,
            activation: Activation::Relu,
            mode_m: CONV_MODE_M,
            n: 2,
        }
    }

    pub fn linear(in_features: u32, out_features: u32) -> Self {
        Self {
            kind: LayerKind::Linear,
            in_channels: in_features,
            out_channels: out_features,
            activation: Activation::Relu,
            mode_m: LINEAR_MODE_M,
            n: 2,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_mode(mut self, mode_m: u32) -> Self {
        self.mode_m = mode_m;
        self
    }

    pub fn kernel(&self) -> u32 {
        match self.kind {
            LayerKind::Conv1d { kernel, .. } => kernel,
            LayerKind::Linear => 1,
        }
    }

    /// Weights per output row (`in_channels * kernel`).
    pub fn row_len(&self) -> usize {
        self.in_channels as usize * self.kernel() as usize
    }

    /// Output shape `(channels, length)` for an input of `(channels, length)`.
    pub fn output_shape(&self, input: (u32, u32)) -> Result<(u32, u32), String> {
        match self.kind {
            LayerKind::Conv1d { kernel, stride } => {
                if kernel == 0 || stride == 0 {
                    return Err("kernel and stride must be at least 1".into());
                }
                if input.0 != self.in_channels {
                    return Err(format!(
                        "expects {} input channels, got {}",
                        self.in_channels, input.0
                    ));
                }
                if input.1 < kernel {
                    return Err(format!("input length {} shorter than kernel {kernel}", input.1));
                }
                Ok((self.out_channels, (input.1 - kernel) / stride + 1))
            }
            LayerKind::Linear => {
                if input.0 * input.1 != self.in_channels {
                    return Err(format!(
                        "expects {} features, got {}x{}",
                        self.in_channels, input.0, input.1
                    ));
                }
                Ok((self.out_channels, 1))
            }
        }
    }
}

/// Per-channel batch-norm parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatLayer {
    pub spec: LayerSpec,
    /// Row-major `[out][in][kernel]`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub bn: Option<BatchNorm>,
    /// Expected max |output| used to size the next activation scale.
    pub output_range: Option<f32>,
}

/// A layer after batch-norm folding, in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedLayer {
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub output_range: Option<f64>,
}

/// Absorbs batch norm into the preceding layer:
/// `w' = w * g / sqrt(var + eps)`, `b' = (b - mean) * g / sqrt(var + eps) + beta`.
pub fn fold_batchnorm(layer: &FloatLayer) -> Result<FoldedLayer, ModelError> {
    fold_at(layer, 0)
}

fn fold_at(layer: &FloatLayer, index: usize) -> Result<FoldedLayer, ModelError> {
    let mut weights: Vec<f64> = layer.weights.iter().map(|&w| w as f64).collect();
    let mut bias: Vec<f64> = layer.bias.iter().map(|&b| b as f64).collect();
    if let Some(bn) = &layer.bn {
        let row = layer.spec.row_len();
        for (o, b) in bias.iter_mut().enumerate() {
            let denom = bn.var[o] as f64 + bn.eps as f64;
            if denom.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return Err(ModelError::BadBNParams {
                    layer: index,
                    channel: o,
                });
            }
            let k = bn.gamma[o] as f64 / denom.sqrt();
            for w in &mut weights[o * row..(o + 1) * row] {
                *w *= k;
            }
            *b = (*b - bn.mean[o] as f64) * k + bn.beta[o] as f64;
        }
    }
    Ok(FoldedLayer {
        spec: layer.spec,
        weights,
        bias,
        output_range: layer.output_range.map(|r| r as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatModel {
    pub input_channels: u32,
    pub input_len: u32,
    /// Real value of one input code step.
    pub input_scale: f32,
    pub input_sign: ActivationSign,
    pub layers: Vec<FloatLayer>,
}

impl FloatModel {
    pub fn class_count(&self) -> u32 {
        self.layers.last().map_or(0, |l| l.spec.out_channels)
    }

    /// Checks shapes, tensor sizes, batch-norm placement and the class bound.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers.is_empty() {
            return Err(ModelError::Empty);
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(ModelError::BadInputScale(self.input_scale));
        }
        let mut shape = (self.input_channels, self.input_len);
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| ModelError::Shape { layer: i, msg };
            let spec = &layer.spec;
            shape = spec.output_shape(shape).map_err(err)?;
            let out = spec.out_channels as usize;
            if layer.weights.len() != out * spec.row_len() {
                return Err(err(format!(
                    "expected {} weights, got {}",
                    out * spec.row_len(),
                    layer.weights.len()
                )));
            }
            if layer.bias.len() != out {
                return Err(err(format!("expected {out} biases, got {}", layer.bias.len())));
            }
            if let Some(bn) = &layer.bn {
                if spec.kind == LayerKind::Linear {
                    return Err(ModelError::UnsupportedLayer { layer: i });
                }
                let lens = [bn.gamma.len(), bn.beta.len(), bn.mean.len(), bn.var.len()];
                if lens.iter().any(|&l| l != out) {
                    return Err(err(format!("batch norm needs {out} entries per parameter")));
                }
            }
        }
        let classes = self.class_count();
        if classes == 0 || classes > MAX_CLASSES {
            return Err(ModelError::BadClassCount(classes));
        }
        Ok(())
    }

    /// Folds batch norm into every layer.
    pub fn fold(&self) -> Result<Vec<FoldedLayer>, ModelError> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| fold_at(l, i))
            .collect()
    }

    /// Real-valued forward pass with batch norm applied explicitly.
    ///
    /// `input` is `[channels][len]` in real units.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_layers(input).pop().unwrap_or_default()
    }

    /// Outputs of every layer in order.
    pub fn forward_layers(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut x = input.to_vec();
        let mut len = self.input_len as usize;
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w: Vec<f64> = layer.weights.iter().map(|&v| v as f64).collect();
            let b: Vec<f64> = layer.bias.iter().map(|&v| v as f64).collect();
            let (mut y, out_len) = affine(&layer.spec, &w, &b, &x, len);
            if let Some(bn) = &layer.bn {
                for (o, ch) in y.chunks_mut(out_len).enumerate() {
                    let k = bn.gamma[o] as f64 / (bn.var[o] as f64 + bn.eps as f64).sqrt();
                    for v in ch {
                        *v = (*v - bn.mean[o] as f64) * k + bn.beta[o] as f64;
                    }
                }
            }
            if layer.spec.activation == Activation::Relu {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            outs.push(y.clone());
            x = y;
            len = out_len;
        }
        outs
    }

    /// Sets each layer's `output_range` to `headroom` times the largest
    /// magnitude it produces over `inputs`.
    pub fn calibrate_output_ranges(&mut self, inputs: &[Vec<f64>], headroom: f64) {
        let mut peaks = vec![0.0f64; self.layers.len()];
        for input in inputs {
            for (peak, out) in peaks.iter_mut().zip(self.forward_layers(input)) {
                *peak = out.iter().fold(*peak, |a, v| a.max(v.abs()));
            }
        }
        for (layer, peak) in self.layers.iter_mut().zip(peaks) {
            layer.output_range = Some(if peak > 0.0 { (peak * headroom) as f32 } else { 1.0 });
        }
    }
}

/// `y = W x + b` for one layer; returns `([out][out_len], out_len)`.
pub(crate) fn affine(spec: &LayerSpec, w: &[f64], b: &[f64], x: &[f64], len: usize) -> (Vec<f64>, usize) {
    let out = spec.out_channels as usize;
    match spec.kind {
        LayerKind::Conv1d { kernel, stride } => {
            let (k, s) = (kernel as usize, stride as usize);
            let out_len = (len - k) / s + 1;
            let cin = spec.in_channels as usize;
            let mut y = vec![0.0; out * out_len];
            for o in 0..out {
                for t in 0..out_len {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for j in 0..k {
                            acc += w[(o * cin + c) * k + j] * x[c * len + t * s + j];
                        }
                    }
                    y[o * out_len + t] = acc;
                }
            }
            (y, out_len)
        }
        LayerKind::Linear => {
            let row = spec.row_len();
            let y = (0..out)
                .map(|o| b[o] + w[o * row..(o + 1) * row].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            (y, 1)
        }
    }
}

/// Geometry of the shipped desk-scale network. Not a published topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeskModelShape {
    pub input_len: u32,
    pub classes: u32,
}

/// conv(1->8, k7, s2) - conv(8->16, k5, s2) - linear(->32) - linear(->classes),
/// He-initialized from `seed`, batch norm on both conv layers, and output
/// ranges calibrated on seeded synthetic inputs.
pub fn default_desk_model(seed: u64, shape: DeskModelShape) -> FloatModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv1 = LayerSpec::conv1d(1, 8, 7, 2);
    let conv2 = LayerSpec::conv1d(8, 16, 5, 2);
    let (_, t1) = conv1.output_shape((1, shape.input_len)).expect("input long enough");
    let (_, t2) = conv2.output_shape((8, t1)).expect("input long enough");
    let fc1 = LayerSpec::linear(16 * t2, 32);
    let fc2 = LayerSpec::linear(32, shape.classes).with_activation(Activation::None);

    let mut layer = |spec: LayerSpec, bn: bool| {
        let fan_in = spec.row_len() as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let out = spec.out_channels as usize;
        let weights = (0..out * spec.row_len())
            .map(|_| normal.sample(&mut rng) as f32)
            .collect();
        let bias = (0..out).map(|_| rng.random_range(-0.05..0.05)).collect();
        let bn = bn.then(|| BatchNorm {
            gamma: (0..out).map(|_| rng.random_range(0.8..1.2)).collect(),
            beta: (0..out).map(|_| rng.random_range(-0.1..0.1)).collect(),
            mean: (0..out).map(|_| rng.random_range(-0.1..0.1)).collect(),
            var: (0..out).map(|_| rng.random_range(0.5..1.5)).collect(),
            eps: 1e-5,
        });
        FloatLayer {
            spec,
            weights,
            bias,
            bn,
            output_range: None,
        }
    };
    let layers = vec![layer(conv1, true), layer(conv2, true), layer(fc1, false), layer(fc2, false)];
    let mut model = FloatModel {
        input_channels: 1,
        input_len: shape.input_len,
        input_scale: 1.0 / 128.0,
        input_sign: ActivationSign::Unsigned,
        layers,
    };
    let inputs: Vec<Vec<f64>> = (0..16)
        .map(|_| {
            (0..shape.input_len)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    model.calibrate_output_ranges(&inputs, 1.25);
    model
}
