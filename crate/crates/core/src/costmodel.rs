//! Memory, MUX, cycle and power-gating accounting.
//!
//! Everything here is a pure function of shapes and configuration; the
//! engine's measured counters are expected to agree with the predictions.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::compiler::{CompiledLayer, CompiledModel};
use crate::mpu::{BatchAccess, CycleCount, MONOLITHIC_BITS};

/// Weight-memory blocks that can be power-gated independently.
pub const GATING_BLOCKS: usize = 6;

/// `(muxnet_bits, lut_bits)` for `num_chunks` weight vectors: `m*n` bits of
/// index per chunk, against `m*2^n + m*n` for a per-chunk lookup table.
pub fn memory_cost(n: u32, m: u32, num_chunks: u64) -> (u64, u64) {
    let (n64, m64) = (n as u64, m as u64);
    (num_chunks * m64 * n64, num_chunks * (m64 * (1u64 << n) + m64 * n64))
}

/// `(monolithic_entries, decomposed_entries, ratio)` for a width-`m` table
/// split into halves of `ceil(m/2)` and `floor(m/2)` bits.
pub fn decomposition_cost(n: u32, m: u32) -> (u128, u128, f64) {
    let keys = 1u128 << n;
    let mono = (1u128 << (n * m)) * keys;
    let (hi, lo) = (m.div_ceil(2), m / 2);
    let dec = ((1u128 << (n * hi)) + (1u128 << (n * lo))) * keys;
    (mono, dec, mono as f64 / dec as f64)
}

/// Entries of the table(s) the engine actually instantiates for `(n, m)`.
pub fn table_entries(n: u32, m: u32) -> u128 {
    let (mono, dec, _) = decomposition_cost(n, m);
    if n * m <= MONOLITHIC_BITS {
        mono
    } else {
        dec
    }
}

fn split(n: u32, m: u32) -> u64 {
    if n * m <= MONOLITHIC_BITS {
        1
    } else {
        2
    }
}

/// Engine geometry the predictions assume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineShape {
    pub groups: u32,
    pub group_vector_len: u32,
}

impl EngineShape {
    /// 8 groups of `4n` activations, as `ModelEngine` builds.
    pub fn for_n(n: u32) -> Self {
        Self {
            groups: 8,
            group_vector_len: 4 * n,
        }
    }

    pub fn chunks_per_group(&self, n: u32) -> u64 {
        (self.group_vector_len / n) as u64
    }

    pub fn mux_count(&self, n: u32) -> u64 {
        self.groups as u64 * self.chunks_per_group(n)
    }
}

fn positions(layer: &CompiledLayer, input: (u32, u32)) -> u64 {
    layer.output_shape(input).1 as u64
}

/// Counters the engine will report for one layer over one input.
pub fn predict_layer_counts(
    layer: &CompiledLayer,
    n: u32,
    activation_bits: u32,
    input: (u32, u32),
    shape: EngineShape,
) -> CycleCount {
    let p = positions(layer, input);
    let rows = layer.out_channels as u64;
    let cpr = layer.chunks_per_row as u64;
    let bits = activation_bits as u64;
    let halves = split(n, layer.mode_m);
    let groups_per_row = cpr.div_ceil(shape.chunks_per_group(n));
    let groups = p * rows * groups_per_row;
    let chunk_visits = p * rows * cpr;
    let stage1 = chunk_visits * (1u64 << n) * halves;
    let stage2 = chunk_visits * bits * halves;
    CycleCount {
        cycles: groups.div_ceil(shape.groups as u64) * bits,
        mux_selects: stage1 + stage2,
        stage1_selects: stage1,
        stage2_selects: stage2,
        memory_bits_read: chunk_visits * (n * layer.mode_m) as u64,
        adder_ops: chunk_visits * bits * halves + p * rows * (groups_per_row - 1),
    }
}

/// Weight-memory addresses each batch touches, in engine issue order.
pub fn predict_access_trace(model: &CompiledModel, shape: EngineShape) -> Vec<BatchAccess> {
    let n = model.header.n;
    let per_group = shape.chunks_per_group(n);
    let bits = model.header.activation_bits as u64;
    let mut out = Vec::new();
    let mut base = 0u64;
    for (layer, input) in model.layers.iter().zip(model.layer_input_shapes()) {
        let cpr = layer.chunks_per_row as u64;
        let mut pending: Vec<u64> = Vec::new();
        let mut in_batch = 0u32;
        for _ in 0..positions(layer, input) {
            for r in 0..layer.out_channels as u64 {
                let row_base = base + r * cpr;
                let mut first = 0;
                while first < cpr {
                    let last = (first + per_group).min(cpr);
                    pending.extend(row_base + first..row_base + last);
                    first = last;
                    in_batch += 1;
                    if in_batch == shape.groups {
                        pending.sort_unstable();
                        pending.dedup();
                        out.push(BatchAccess {
                            cycles: bits,
                            addresses: std::mem::take(&mut pending),
                        });
                        in_batch = 0;
                    }
                }
            }
        }
        if in_batch > 0 {
            pending.sort_unstable();
            pending.dedup();
            out.push(BatchAccess {
                cycles: bits,
                addresses: pending,
            });
        }
        base += layer.chunk_count();
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct GatingReport {
    /// Active cycles per block.
    pub block_active_cycles: [u64; GATING_BLOCKS],
    pub cycles: u64,
    pub saved_fraction: f64,
}

/// Splits `capacity_words` of weight memory into six contiguous equal
/// ranges; a block is active for a batch's cycles iff any read hits it.
pub fn gating_report(trace: &[BatchAccess], capacity_words: u64) -> GatingReport {
    let block_size = capacity_words.div_ceil(GATING_BLOCKS as u64).max(1);
    let mut report = GatingReport::default();
    for batch in trace {
        let mut active = [false; GATING_BLOCKS];
        for &a in &batch.addresses {
            active[((a / block_size) as usize).min(GATING_BLOCKS - 1)] = true;
        }
        for (b, on) in active.iter().enumerate() {
            if *on {
                report.block_active_cycles[b] += batch.cycles;
            }
        }
        report.cycles += batch.cycles;
    }
    let active: u64 = report.block_active_cycles.iter().sum();
    report.saved_fraction = if report.cycles == 0 {
        0.0
    } else {
        1.0 - active as f64 / (GATING_BLOCKS as u64 * report.cycles) as f64
    };
    report
}

/// Abstract per-event energy units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyCoefficients {
    pub per_mux_select: f64,
    pub per_memory_bit: f64,
    pub per_adder_op: f64,
}

impl Default for EnergyCoefficients {
    fn default() -> Self {
        Self {
            per_mux_select: 1.0,
            per_memory_bit: 1.0,
            per_adder_op: 1.0,
        }
    }
}

impl EnergyCoefficients {
    pub fn energy(&self, c: &CycleCount) -> f64 {
        self.per_mux_select * c.mux_selects as f64
            + self.per_memory_bit * c.memory_bits_read as f64
            + self.per_adder_op * c.adder_ops as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CostReport {
    pub weight_memory_bits: u64,
    pub lut_memory_bits: u64,
    pub mux_count: u64,
    pub mux_selects: u64,
    pub cycles: u64,
    pub table_entries: u128,
    pub gating: [u64; GATING_BLOCKS],
    pub counts: CycleCount,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub layer: usize,
    pub n: u32,
    pub m: u32,
    pub report: CostReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelCost {
    pub layers: Vec<LayerCost>,
    pub total: CostReport,
    pub gating: GatingReport,
}

/// Predicted cost of one inference of `model`.
///
/// The total's `table_entries` counts each distinct `(n, m)` table once.
pub fn model_cost(model: &CompiledModel, energy: &EnergyCoefficients) -> ModelCost {
    let n = model.header.n;
    let bits = model.header.activation_bits;
    let shape = EngineShape::for_n(n);
    let trace = predict_access_trace(model, shape);
    let capacity = model.total_chunks();
    let gating = gating_report(&trace, capacity);

    let mut layers = Vec::with_capacity(model.layers.len());
    let mut base = 0u64;
    let mut offset = 0usize;
    for (i, (layer, input)) in model.layers.iter().zip(model.layer_input_shapes()).enumerate() {
        let counts = predict_layer_counts(layer, n, bits, input, shape);
        let (mem, lut) = memory_cost(n, layer.mode_m, layer.chunk_count());
        let batches = counts.cycles / bits as u64;
        let layer_trace: Vec<BatchAccess> = trace[offset..offset + batches as usize].to_vec();
        offset += batches as usize;
        let g = gating_report(&layer_trace, capacity);
        base += layer.chunk_count();
        layers.push(LayerCost {
            layer: i,
            n,
            m: layer.mode_m,
            report: CostReport {
                weight_memory_bits: mem,
                lut_memory_bits: lut,
                mux_count: shape.mux_count(n),
                mux_selects: counts.mux_selects,
                cycles: counts.cycles,
                table_entries: table_entries(n, layer.mode_m),
                gating: g.block_active_cycles,
                counts,
                energy: energy.energy(&counts),
            },
        });
    }
    debug_assert_eq!(base, capacity);

    let mut total = CostReport {
        mux_count: shape.mux_count(n),
        gating: gating.block_active_cycles,
        ..Default::default()
    };
    let mut modes: Vec<u32> = model.layers.iter().map(|l| l.mode_m).collect();
    modes.sort_unstable();
    modes.dedup();
    total.table_entries = modes.iter().map(|&m| table_entries(n, m)).sum();
    for l in &layers {
        total.weight_memory_bits += l.report.weight_memory_bits;
        total.lut_memory_bits += l.report.lut_memory_bits;
        total.mux_selects += l.report.mux_selects;
        total.cycles += l.report.cycles;
        total.counts += l.report.counts;
    }
    total.energy = energy.energy(&total.counts);
    ModelCost {
        layers,
        total,
        gating,
    }
}

pub const CSV_HEADER: &str = "layer,n,m,weight_memory_bits,lut_memory_bits,mux_count,mux_selects,\
cycles,table_entries,memory_bits_read,adder_ops,energy,gated_saved_fraction";

fn csv_row<W: Write>(out: &mut W, label: &str, n: u32, m: &str, r: &CostReport, saved: f64) -> io::Result<()> {
    writeln!(
        out,
        "{label},{n},{m},{},{},{},{},{},{},{},{},{:.6},{:.6}",
        r.weight_memory_bits,
        r.lut_memory_bits,
        r.mux_count,
        r.mux_selects,
        r.cycles,
        r.table_entries,
        r.counts.memory_bits_read,
        r.counts.adder_ops,
        r.energy,
        saved
    )
}

/// One row per layer, then a `total` row. Writes no header.
pub fn write_cost_rows<W: Write>(mut out: W, cost: &ModelCost) -> io::Result<()> {
    let n = cost.layers.first().map_or(0, |l| l.n);
    for l in &cost.layers {
        let g = gating_report_from_blocks(&l.report.gating, l.report.cycles);
        csv_row(&mut out, &l.layer.to_string(), l.n, &l.m.to_string(), &l.report, g)?;
    }
    csv_row(&mut out, "total", n, "*", &cost.total, cost.gating.saved_fraction)
}

fn gating_report_from_blocks(blocks: &[u64; GATING_BLOCKS], cycles: u64) -> f64 {
    if cycles == 0 {
        return 0.0;
    }
    1.0 - blocks.iter().sum::<u64>() as f64 / (GATING_BLOCKS as u64 * cycles) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{compile, CompileConfig};
    use crate::inference::ModelEngine;
    use crate::model::{default_desk_model, DeskModelShape};

    #[test]
    fn memory_examples() {
        assert_eq!(memory_cost(2, 5, 1), (10, 30));
        assert_eq!(memory_cost(8, 8, 1), (64, 2112));
        assert_eq!(memory_cost(1, 1, 1), (1, 3));
        assert_eq!(memory_cost(2, 5, 7), (70, 210));
    }

    #[test]
    fn lut_overhead_is_table_body() {
        for n in 1..=8 {
            for m in 1..=10 {
                for c in [1u64, 3, 100] {
                    let (mux, lut) = memory_cost(n, m, c);
                    assert_eq!(lut - mux, c * m as u64 * (1u64 << n));
                }
            }
        }
    }

    #[test]
    fn decomposition_examples() {
        let (mono, dec, ratio) = decomposition_cost(2, 10);
        assert_eq!(mono, (1u128 << 20) * 4);
        assert_eq!(dec, 2 * (1u128 << 10) * 4);
        assert_eq!(ratio, 512.0);
        assert_eq!(decomposition_cost(2, 2).2, 2.0);
        for m in (2..=12).step_by(2) {
            for n in 1..=3 {
                let r = decomposition_cost(n, m).2;
                assert_eq!(r, (1u128 << (n * m / 2)) as f64 / 2.0);
            }
        }
    }

    #[test]
    fn gating_examples() {
        let one_block = vec![BatchAccess {
            cycles: 8,
            addresses: vec![0, 1, 2],
        }];
        let g = gating_report(&one_block, 60);
        assert_eq!(g.block_active_cycles, [8, 0, 0, 0, 0, 0]);
        assert!((g.saved_fraction - 5.0 / 6.0).abs() < 1e-12);

        let all = vec![
            BatchAccess {
                cycles: 8,
                addresses: (0..60).step_by(10).collect(),
            };
            3
        ];
        assert_eq!(gating_report(&all, 60).saved_fraction, 0.0);
        assert_eq!(gating_report(&[], 60).saved_fraction, 0.0);
    }

    #[test]
    fn predictions_match_engine() {
        for (seed, n) in [(1u64, 2u32), (2, 1)] {
            let mut model = default_desk_model(seed, DeskModelShape { input_len: 200, classes: 5 });
            model.layers.iter_mut().for_each(|l| l.spec.n = n);
            let cfg = CompileConfig {
                n,
                ..CompileConfig::default()
            };
            let compiled = compile(&model, &cfg).unwrap();
            let mut engine = ModelEngine::new(&compiled).unwrap();
            let x: Vec<i64> = (0..200).map(|i| (i * 37 % 256) as i64).collect();
            engine.forward(&compiled, &x).unwrap();
            let cost = model_cost(&compiled, &EnergyCoefficients::default());
            assert_eq!(engine.counts(), cost.total.counts, "n={n}");
            assert_eq!(engine.take_access_trace(), predict_access_trace(&compiled, EngineShape::for_n(n)));
            assert_eq!(cost.total.weight_memory_bits, compiled.weight_memory_bits());
            assert!(cost.total.lut_memory_bits > cost.total.weight_memory_bits);
            assert!((0.0..1.0).contains(&cost.gating.saved_fraction));
        }
    }

    #[test]
    fn default_engine_selects_per_bitplane() {
        // A full batch of 8 groups x 4 chunks: 32 stage-2 selects per cycle.
        assert_eq!(EngineShape::for_n(2).mux_count(2), 32);
    }

    #[test]
    fn csv_shape() {
        let model = default_desk_model(3, DeskModelShape { input_len: 100, classes: 4 });
        let compiled = compile(&model, &CompileConfig::default()).unwrap();
        let cost = model_cost(&compiled, &EnergyCoefficients::default());
        let mut buf = Vec::new();
        write_cost_rows(&mut buf, &cost).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), compiled.layers.len() + 1);
        let cols = CSV_HEADER.split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == cols));
        assert!(lines.last().unwrap().starts_with("total,2,*,"));
    }
}
