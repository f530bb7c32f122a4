//! Offline translation of a float model into static-table line indices.
//!
//! Per layer: fold batch norm, pick a pre-scale (per output channel for
//! conv, per layer for linear), quantize, pad each row to a multiple of `n`
//! and pack every `n`-code chunk into its line index. Biases are kept at
//! accumulator precision; inter-layer rescaling is an integer multiplier and
//! right shift.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Activation, FloatModel, FoldedLayer, LayerKind, ModelError, MAX_CLASSES};
use crate::mpu::ActivationSign;
use crate::pipeline::SegmentConfig;
use crate::quantizer::{self, choose_prescale, default_prescale_grid, QuantError};
use crate::static_table::{codes_of_line, pack_codes};

pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompileError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("layer {layer}: {msg}")]
    UnsupportedLayer { layer: usize, msg: String },
    #[error("layer {layer}: rescale factor {factor} cannot be represented")]
    RequantRange { layer: usize, factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompileConfig {
    pub n: u32,
    pub activation_bits: u32,
    /// Interpretation of activations entering every layer after the first.
    pub hidden_sign: ActivationSign,
    pub segment: SegmentConfig,
}

impl Default for CompileConfig {
    fn default() -> Self {
        Self {
            n: 2,
            activation_bits: 8,
            hidden_sign: ActivationSign::TwosComplement,
            segment: SegmentConfig::default(),
        }
    }
}

/// Fixed-point rescale `round_half_up(acc * multiplier / 2^shift)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requant {
    pub multiplier: i32,
    pub shift: u8,
}

impl Requant {
    /// Approximates a positive real factor with a 31-bit multiplier.
    pub fn from_factor(factor: f64) -> Option<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return None;
        }
        let mut exp = factor.log2().floor() as i32;
        let mut mult = (factor * 2f64.powi(30 - exp)).round() as i64;
        if mult >= 1 << 31 {
            mult >>= 1;
            exp += 1;
        }
        let mut shift = 30 - exp;
        if shift < 0 {
            return None;
        }
        if shift > 62 {
            shift = 62;
            mult = (factor * 2f64.powi(62)).round() as i64;
        }
        Some(Self {
            multiplier: mult as i32,
            shift: shift as u8,
        })
    }

    pub fn factor(&self) -> f64 {
        self.multiplier as f64 / 2f64.powi(self.shift as i32)
    }

    pub fn apply(&self, acc: i64) -> i64 {
        let prod = acc as i128 * self.multiplier as i128;
        let rounded = if self.shift == 0 {
            prod
        } else {
            (prod + (1i128 << (self.shift - 1))) >> self.shift
        };
        rounded as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub version: u16,
    pub n: u32,
    pub activation_bits: u32,
    pub class_count: u32,
    pub input_channels: u32,
    pub input_len: u32,
    pub input_scale: f64,
    pub input_zero_point: i64,
    pub segment: SegmentConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledLayer {
    pub kind: LayerKind,
    pub in_channels: u32,
    pub out_channels: u32,
    pub activation: Activation,
    pub mode_m: u32,
    pub input_sign: ActivationSign,
    /// Weights per row before padding.
    pub row_len: u32,
    pub chunks_per_row: u32,
    /// Row-major `[out][chunk]` line indices.
    pub indices: Vec<u64>,
    /// Per output channel, in accumulator units; input zero point folded in.
    pub bias: Vec<i64>,
    pub weight_scales: Vec<f64>,
    pub input_scale: f64,
    /// Rescale into the next layer's activations; absent on the last layer.
    pub requant: Option<Vec<Requant>>,
}

impl CompiledLayer {
    pub fn kernel(&self) -> u32 {
        match self.kind {
            LayerKind::Conv1d { kernel, .. } => kernel,
            LayerKind::Linear => 1,
        }
    }

    pub fn chunk_count(&self) -> u64 {
        self.indices.len() as u64
    }

    pub fn weight_memory_bits(&self, n: u32) -> u64 {
        self.chunk_count() * (n * self.mode_m) as u64
    }

    /// Decodes row `row` back to its (padded) codes.
    pub fn row_codes(&self, n: u32, row: usize) -> Vec<i32> {
        let cpr = self.chunks_per_row as usize;
        self.indices[row * cpr..(row + 1) * cpr]
            .iter()
            .flat_map(|&i| codes_of_line(i, n, self.mode_m))
            .collect()
    }

    /// `(channels, len)` produced from an input of `(channels, len)`.
    pub fn output_shape(&self, input: (u32, u32)) -> (u32, u32) {
        match self.kind {
            LayerKind::Conv1d { kernel, stride } => {
                (self.out_channels, (input.1 - kernel) / stride + 1)
            }
            LayerKind::Linear => (self.out_channels, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledModel {
    pub header: ModelHeader,
    pub layers: Vec<CompiledLayer>,
}

impl CompiledModel {
    /// `sum over layers of chunks * n * m`.
    pub fn weight_memory_bits(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| l.weight_memory_bits(self.header.n))
            .sum()
    }

    pub fn total_chunks(&self) -> u64 {
        self.layers.iter().map(|l| l.chunk_count()).sum()
    }

    /// Input shape of every layer, in order.
    pub fn layer_input_shapes(&self) -> Vec<(u32, u32)> {
        let mut shape = (self.header.input_channels, self.header.input_len);
        self.layers
            .iter()
            .map(|l| {
                let s = shape;
                shape = l.output_shape(shape);
                s
            })
            .collect()
    }

    /// Converts integer logits back to real units.
    pub fn dequantize_logits(&self, logits: &[i64]) -> Vec<f64> {
        let last = self.layers.last().expect("compiled model has layers");
        logits
            .iter()
            .zip(&last.weight_scales)
            .map(|(&l, &s)| quantizer::dequantize_product(l, s, last.input_scale))
            .collect()
    }
}

/// Compiles a float model. Identical inputs give identical models.
pub fn compile(model: &FloatModel, cfg: &CompileConfig) -> Result<CompiledModel, CompileError> {
    model.validate()?;
    let folded = model.fold()?;
    let n = cfg.n;
    let bits = cfg.activation_bits;

    let input_zero_point = match model.input_sign {
        ActivationSign::Unsigned => 1i64 << (bits - 1),
        ActivationSign::TwosComplement => 0,
    };
    let mut x_scale = model.input_scale as f64;
    let mut zero_point = input_zero_point;
    let mut sign = model.input_sign;
    // Largest real magnitude entering the current layer.
    let (lo, hi) = sign.range(bits);
    let mut in_bound = ((lo - zero_point).abs().max((hi - zero_point).abs())) as f64 * x_scale;

    let mut layers = Vec::with_capacity(folded.len());
    for (i, layer) in folded.iter().enumerate() {
        let spec = &layer.spec;
        if spec.n != n {
            return Err(CompileError::UnsupportedLayer {
                layer: i,
                msg: format!("n={} differs from the engine n={n}", spec.n),
            });
        }
        if !(2..=16).contains(&spec.mode_m) || (n * spec.mode_m > 12 && spec.mode_m % 2 != 0) {
            return Err(CompileError::UnsupportedLayer {
                layer: i,
                msg: format!("mode m={} is not supported", spec.mode_m),
            });
        }
        let m = spec.mode_m;
        let out = spec.out_channels as usize;
        let row_len = spec.row_len();
        let chunks_per_row = row_len.div_ceil(n as usize);

        let weight_scales = channel_scales(layer, m)?;
        let mut indices = Vec::with_capacity(out * chunks_per_row);
        let mut bias = Vec::with_capacity(out);
        for (o, (row, &scale)) in layer.weights.chunks_exact(row_len).zip(&weight_scales).enumerate() {
            let mut codes = quantizer::quantize_weights(row, m, scale)?
                .codes()
                .to_vec();
            let code_sum: i64 = codes.iter().map(|&c| c as i64).sum();
            codes.resize(chunks_per_row * n as usize, 0);
            indices.extend(codes.chunks(n as usize).map(|c| pack_codes(c, m)));
            let b = (layer.bias[o] / (scale * x_scale)).round() as i64;
            bias.push(b - zero_point * code_sum);
        }

        let out_bound = layer_output_bound(layer, in_bound);
        let is_last = i + 1 == folded.len();
        let (requant, next_scale) = if is_last {
            (None, x_scale)
        } else {
            let range = layer.output_range.filter(|r| *r > 0.0).unwrap_or(out_bound);
            let (_, qmax) = cfg.hidden_sign.range(bits);
            let y_scale = range / qmax as f64;
            let rq = weight_scales
                .iter()
                .map(|&s| {
                    let factor = s * x_scale / y_scale;
                    Requant::from_factor(factor)
                        .ok_or(CompileError::RequantRange { layer: i, factor })
                })
                .collect::<Result<Vec<_>, _>>()?;
            (Some(rq), y_scale)
        };

        layers.push(CompiledLayer {
            kind: spec.kind,
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            activation: spec.activation,
            mode_m: m,
            input_sign: sign,
            row_len: row_len as u32,
            chunks_per_row: chunks_per_row as u32,
            indices,
            bias,
            weight_scales,
            input_scale: x_scale,
            requant,
        });
        x_scale = next_scale;
        zero_point = 0;
        sign = cfg.hidden_sign;
        in_bound = layer.output_range.unwrap_or(out_bound);
    }

    let class_count = model.class_count();
    debug_assert!(class_count <= MAX_CLASSES);
    Ok(CompiledModel {
        header: ModelHeader {
            version: FORMAT_VERSION,
            n,
            activation_bits: bits,
            class_count,
            input_channels: model.input_channels,
            input_len: model.input_len,
            input_scale: model.input_scale as f64,
            input_zero_point,
            segment: cfg.segment,
        },
        layers,
    })
}

fn channel_scales(layer: &FoldedLayer, m: u32) -> Result<Vec<f64>, CompileError> {
    let out = layer.spec.out_channels as usize;
    let row = layer.spec.row_len();
    match layer.spec.kind {
        LayerKind::Conv1d { .. } => layer
            .weights
            .chunks(row)
            .map(|w| Ok(choose_prescale(w, m, &default_prescale_grid(w, m))?))
            .collect(),
        LayerKind::Linear => {
            let w = &layer.weights;
            let s = choose_prescale(w, m, &default_prescale_grid(w, m))?;
            Ok(vec![s; out])
        }
    }
}

/// `max_o (sum |w_o| * in_bound + |b_o|)`: no input within `in_bound` can
/// produce a larger output.
fn layer_output_bound(layer: &FoldedLayer, in_bound: f64) -> f64 {
    let row = layer.spec.row_len();
    layer
        .weights
        .chunks(row)
        .zip(&layer.bias)
        .map(|(w, b)| w.iter().map(|v| v.abs()).sum::<f64>() * in_bound + b.abs())
        .fold(0.0, f64::max)
}
