//! Running a compiled model: through the MUX engine, or through plain
//! integer multiply-accumulate as the reference.
//!
//! Both paths share patch extraction, bias addition and requantization, so
//! any disagreement isolates the inner-product datapath.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::compiler::{CompiledLayer, CompiledModel};
use crate::model::{Activation, LayerKind};
use crate::mpu::{ActivationSign, BatchAccess, CycleCount, MpuConfig, MpuEngine, MpuError, WeightTable};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Mpu(#[from] MpuError),
    #[error("input has {got} samples, model expects {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("input sample {value} at position {pos} outside the first layer's range")]
    InputRange { pos: usize, value: i64 },
}

/// Builds `[position][row_len padded to chunks * n]` activation patches for
/// one layer from a `[channels][len]` input.
pub fn layer_patches(layer: &CompiledLayer, n: u32, input: &[i64], len: usize) -> Vec<Vec<i64>> {
    let padded = layer.chunks_per_row as usize * n as usize;
    match layer.kind {
        LayerKind::Conv1d { kernel, stride } => {
            let (k, s) = (kernel as usize, stride as usize);
            let cin = layer.in_channels as usize;
            let out_len = (len - k) / s + 1;
            (0..out_len)
                .map(|t| {
                    let mut patch = Vec::with_capacity(padded);
                    for c in 0..cin {
                        patch.extend_from_slice(&input[c * len + t * s..c * len + t * s + k]);
                    }
                    patch.resize(padded, 0);
                    patch
                })
                .collect()
        }
        LayerKind::Linear => {
            let mut patch = input.to_vec();
            patch.resize(padded, 0);
            vec![patch]
        }
    }
}

/// Bias, requantization, activation and clamping of one layer's raw
/// accumulators `[position][row]`. Returns the `[row][position]` output.
fn finish_layer(
    layer: &CompiledLayer,
    next: Option<(ActivationSign, u32)>,
    acc: &[Vec<i64>],
) -> Vec<i64> {
    let rows = layer.out_channels as usize;
    let positions = acc.len();
    let mut out = vec![0i64; rows * positions];
    for (p, row_vals) in acc.iter().enumerate() {
        for (o, &v) in row_vals.iter().enumerate() {
            let mut y = v + layer.bias[o];
            if let (Some(rq), Some((sign, bits))) = (&layer.requant, next) {
                y = rq[o].apply(y);
                if layer.activation == Activation::Relu {
                    y = y.max(0);
                }
                let (lo, hi) = sign.range(bits);
                y = y.clamp(lo, hi);
            } else if layer.activation == Activation::Relu {
                y = y.max(0);
            }
            out[o * positions + p] = y;
        }
    }
    out
}

fn check_input(model: &CompiledModel, input: &[i64]) -> Result<(), InferenceError> {
    let h = &model.header;
    let expected = (h.input_channels * h.input_len) as usize;
    if input.len() != expected {
        return Err(InferenceError::InputLength {
            expected,
            got: input.len(),
        });
    }
    let (lo, hi) = model.layers[0].input_sign.range(h.activation_bits);
    if let Some(pos) = input.iter().position(|x| !(lo..=hi).contains(x)) {
        return Err(InferenceError::InputRange {
            pos,
            value: input[pos],
        });
    }
    Ok(())
}

fn run_layers<F>(model: &CompiledModel, input: &[i64], mut layer_mac: F) -> Result<Vec<i64>, InferenceError>
where
    F: FnMut(usize, &CompiledLayer, &[Vec<i64>], u64) -> Result<Vec<Vec<i64>>, InferenceError>,
{
    check_input(model, input)?;
    let h = &model.header;
    let mut x = input.to_vec();
    let mut len = h.input_len as usize;
    let mut base = 0u64;
    for (i, layer) in model.layers.iter().enumerate() {
        let patches = layer_patches(layer, h.n, &x, len);
        let acc = layer_mac(i, layer, &patches, base)?;
        let next = model
            .layers
            .get(i + 1)
            .map(|l| (l.input_sign, h.activation_bits));
        x = finish_layer(layer, next, &acc);
        len = patches.len();
        base += layer.chunk_count();
    }
    Ok(x)
}

/// Reference inference: codes decoded from the line indices and multiplied
/// directly.
pub fn reference_forward(model: &CompiledModel, input: &[i64]) -> Result<Vec<i64>, InferenceError> {
    let n = model.header.n;
    run_layers(model, input, |_, layer, patches, _| {
        let rows: Vec<Vec<i32>> = (0..layer.out_channels as usize)
            .map(|o| layer.row_codes(n, o))
            .collect();
        Ok(patches
            .iter()
            .map(|patch| {
                rows.iter()
                    .map(|codes| codes.iter().zip(patch).map(|(&w, &x)| w as i64 * x).sum())
                    .collect()
            })
            .collect())
    })
}

/// Shared static tables, one per code width.
#[derive(Debug, Clone, Default)]
pub struct TableCache {
    tables: BTreeMap<(u32, u32), Arc<WeightTable>>,
}

impl TableCache {
    pub fn get(&mut self, n: u32, m: u32) -> Result<Arc<WeightTable>, MpuError> {
        if let Some(t) = self.tables.get(&(n, m)) {
            return Ok(t.clone());
        }
        let t = Arc::new(WeightTable::for_mode(n, m)?);
        self.tables.insert((n, m), t.clone());
        Ok(t)
    }

    /// Replaces the table for `(n, m)`, e.g. with a deliberately faulty one.
    pub fn insert(&mut self, table: WeightTable) {
        self.tables.insert((table.n(), table.m()), Arc::new(table));
    }
}

/// An engine bound to a compiled model.
#[derive(Debug, Clone)]
pub struct ModelEngine {
    engine: MpuEngine,
    tables: Vec<Arc<WeightTable>>,
}

impl ModelEngine {
    /// Standard engine (8 groups of 8) at the model's `n` and bit-width.
    pub fn new(model: &CompiledModel) -> Result<Self, InferenceError> {
        Self::with_tables(model, &mut TableCache::default())
    }

    pub fn with_tables(model: &CompiledModel, cache: &mut TableCache) -> Result<Self, InferenceError> {
        let h = &model.header;
        let first = &model.layers[0];
        let cfg = MpuConfig {
            n: h.n,
            m: first.mode_m,
            groups: 8,
            group_vector_len: 4 * h.n,
            activation_bits: h.activation_bits,
            activation_sign: first.input_sign,
        };
        let engine = MpuEngine::new(cfg)?;
        let tables = model
            .layers
            .iter()
            .map(|l| cache.get(h.n, l.mode_m))
            .collect::<Result<_, _>>()?;
        Ok(Self { engine, tables })
    }

    pub fn engine(&self) -> &MpuEngine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut MpuEngine {
        &mut self.engine
    }

    pub fn counts(&self) -> CycleCount {
        self.engine.counts()
    }

    pub fn take_access_trace(&mut self) -> Vec<BatchAccess> {
        self.engine.take_access_trace()
    }

    /// Integer logits through the two-stage MUX datapath.
    pub fn forward(&mut self, model: &CompiledModel, input: &[i64]) -> Result<Vec<i64>, InferenceError> {
        let engine = &mut self.engine;
        let tables = &self.tables;
        run_layers(model, input, |i, layer, patches, base| {
            engine.set_mode(layer.mode_m)?;
            engine.set_activation_sign(layer.input_sign);
            Ok(engine.pe_forward(
                &layer.indices,
                layer.chunks_per_row as usize,
                patches,
                &tables[i],
                base,
            )?)
        })
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[i64]) -> usize {
    logits
        .iter()
        .enumerate()
        .fold((0, i64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{compile, CompileConfig};
    use crate::model::{default_desk_model, DeskModelShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[1, 3, 3, 0]), 1);
        assert_eq!(argmax(&[0, 0]), 0);
        assert_eq!(argmax(&[-5, -2, -9]), 1);
    }

    #[test]
    fn engine_matches_reference() {
        let model = default_desk_model(4, DeskModelShape { input_len: 120, classes: 5 });
        let compiled = compile(&model, &CompileConfig::default()).unwrap();
        let mut engine = ModelEngine::new(&compiled).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut distinct = std::collections::BTreeSet::new();
        for _ in 0..10 {
            let x: Vec<i64> = (0..120).map(|_| rng.random_range(0..=255)).collect();
            let a = engine.forward(&compiled, &x).unwrap();
            let b = reference_forward(&compiled, &x).unwrap();
            assert_eq!(a, b);
            distinct.insert(a);
        }
        assert!(distinct.len() > 1, "logits should depend on the input");
    }

    #[test]
    fn quantized_logits_track_float() {
        let model = default_desk_model(5, DeskModelShape { input_len: 120, classes: 5 });
        let compiled = compile(&model, &CompileConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut agree = 0;
        for _ in 0..20 {
            let codes: Vec<i64> = (0..120).map(|_| rng.random_range(0..=255)).collect();
            let real: Vec<f64> = codes.iter().map(|&c| (c - 128) as f64 / 128.0).collect();
            let want = model.forward(&real);
            let got = compiled.dequantize_logits(&reference_forward(&compiled, &codes).unwrap());
            let spread = want.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let err = want.iter().zip(&got).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            assert!(err < 0.25 * spread.max(1e-3), "err {err} spread {spread}");
            let wi = want
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            agree += (wi == argmax(&reference_forward(&compiled, &codes).unwrap())) as u32;
        }
        assert!(agree >= 14, "argmax agreement {agree}/20");
    }

    #[test]
    fn input_checks() {
        let model = default_desk_model(4, DeskModelShape { input_len: 60, classes: 3 });
        let compiled = compile(&model, &CompileConfig::default()).unwrap();
        assert_eq!(
            reference_forward(&compiled, &[0; 59]),
            Err(InferenceError::InputLength { expected: 60, got: 59 })
        );
        let mut x = vec![0; 60];
        x[3] = 256;
        assert_eq!(
            reference_forward(&compiled, &x),
            Err(InferenceError::InputRange { pos: 3, value: 256 })
        );
    }
}
