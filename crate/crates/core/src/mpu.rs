//! Bit-exact, cycle-accounted model of the two-stage MUX processing engine.
//!
//! Stage 1 selects a static-table line with the weight index held in weight
//! memory. Stage 2 selects one entry of that line with an `n`-bit key formed
//! from a single activation bit-plane. The PLMU accumulates the selected
//! entries shifted by their bit-plane, and an adder tree merges the group
//! results of one output.
//!
//! Nothing on this path multiplies: the only arithmetic is selection, shift
//! and add. The engine counts MUX selections, memory reads and cycles as it
//! goes; timing depends only on shapes and configuration.

use std::fmt;
use std::ops::AddAssign;

use thiserror::Error;

use crate::quantizer::QuantizedWeightVector;
use crate::static_table::{
    build_static_table, decompose_table, DecomposedTable, StaticTable, TableError,
};

/// Largest `n * m` served by a single monolithic table; wider modes are
/// decomposed into two half-width tables.
pub const MONOLITHIC_BITS: u32 = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MpuError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("activation {value} at position {pos} outside the {bits}-bit {sign} range")]
    ActivationOutOfRange {
        pos: usize,
        value: i64,
        bits: u32,
        sign: ActivationSign,
    },
    #[error("accumulator value {value} exceeds the declared {width}-bit width")]
    AccumulatorOverflow { value: i64, width: u32 },
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("invalid engine configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationSign {
    Unsigned,
    TwosComplement,
}

impl fmt::Display for ActivationSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActivationSign::Unsigned => "unsigned",
            ActivationSign::TwosComplement => "two's-complement",
        })
    }
}

impl ActivationSign {
    /// Inclusive code range for `bits`-wide activations.
    pub fn range(self, bits: u32) -> (i64, i64) {
        match self {
            ActivationSign::Unsigned => (0, (1i64 << bits) - 1),
            ActivationSign::TwosComplement => (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1),
        }
    }
}

fn ceil_log2(x: u64) -> u32 {
    if x <= 1 {
        0
    } else {
        64 - (x - 1).leading_zeros()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MpuConfig {
    pub n: u32,
    pub m: u32,
    /// Inner-product groups evaluated in parallel per cycle.
    pub groups: u32,
    /// Elements per group inner product.
    pub group_vector_len: u32,
    pub activation_bits: u32,
    pub activation_sign: ActivationSign,
}

impl MpuConfig {
    /// 8 groups of 8-element inner products with 8-bit activations at `n = 2`.
    pub fn standard(m: u32, activation_sign: ActivationSign) -> Self {
        Self {
            n: 2,
            m,
            groups: 8,
            group_vector_len: 8,
            activation_bits: 8,
            activation_sign,
        }
    }

    pub fn validate(&self) -> Result<(), MpuError> {
        let bad = |msg: String| Err(MpuError::Config(msg));
        if self.n == 0 || self.n > 8 {
            return bad(format!("n={} outside 1..=8", self.n));
        }
        if self.m == 0 || self.m > 16 {
            return bad(format!("m={} outside 1..=16", self.m));
        }
        if self.groups == 0 {
            return bad("groups must be at least 1".into());
        }
        if self.group_vector_len == 0 || !self.group_vector_len.is_multiple_of(self.n) {
            return bad(format!(
                "group_vector_len={} must be a positive multiple of n={}",
                self.group_vector_len, self.n
            ));
        }
        if self.activation_bits == 0 || self.activation_bits > 16 {
            return bad(format!(
                "activation_bits={} outside 1..=16",
                self.activation_bits
            ));
        }
        Ok(())
    }

    pub fn chunks_per_group(&self) -> u32 {
        self.group_vector_len / self.n
    }

    /// Stage-2 MUXes working in parallel: `groups * group_vector_len / n`.
    pub fn mux_count(&self) -> u32 {
        self.groups * self.chunks_per_group()
    }

    /// PLMU accumulator width that holds any in-range group inner product.
    pub fn accumulator_width(&self) -> u32 {
        self.m
            + ceil_log2(self.n as u64)
            + ceil_log2(self.chunks_per_group() as u64)
            + self.activation_bits
            + 1
    }

    pub fn activation_range(&self) -> (i64, i64) {
        self.activation_sign.range(self.activation_bits)
    }
}

/// Event counters for one engine instance. Merging is plain summation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct CycleCount {
    pub cycles: u64,
    /// All MUX selections, both stages.
    pub mux_selects: u64,
    pub stage1_selects: u64,
    pub stage2_selects: u64,
    pub memory_bits_read: u64,
    /// PLMU accumulations plus adder-tree additions.
    pub adder_ops: u64,
}

impl AddAssign for CycleCount {
    fn add_assign(&mut self, rhs: Self) {
        self.cycles += rhs.cycles;
        self.mux_selects += rhs.mux_selects;
        self.stage1_selects += rhs.stage1_selects;
        self.stage2_selects += rhs.stage2_selects;
        self.memory_bits_read += rhs.memory_bits_read;
        self.adder_ops += rhs.adder_ops;
    }
}

/// Stage-1 selection: returns the `2^n` entries of line `line_index`.
///
/// Counts one MUX selection per key column.
pub fn stage1_select<'a>(
    table: &'a StaticTable,
    line_index: u64,
    counts: &mut CycleCount,
) -> Result<&'a [i32], MpuError> {
    let line = table.line(line_index)?;
    counts.mux_selects += line.len() as u64;
    counts.stage1_selects += line.len() as u64;
    Ok(line)
}

/// Stage-2 selection: the entry at `key`, masked to the line width.
pub fn stage2_select(line: &[i32], key: u32, counts: &mut CycleCount) -> i32 {
    counts.mux_selects += 1;
    counts.stage2_selects += 1;
    line[key as usize & (line.len() - 1)]
}

/// The table(s) backing one code width.
#[derive(Debug, Clone)]
pub enum WeightTable {
    Monolithic(StaticTable),
    Decomposed(DecomposedTable),
}

impl WeightTable {
    /// Monolithic when `n * m <= MONOLITHIC_BITS`, decomposed otherwise.
    pub fn for_mode(n: u32, m: u32) -> Result<Self, MpuError> {
        if n * m <= MONOLITHIC_BITS {
            Ok(Self::Monolithic(build_static_table(n, m)?))
        } else {
            Ok(Self::Decomposed(decompose_table(m, n)?))
        }
    }

    pub fn n(&self) -> u32 {
        match self {
            Self::Monolithic(t) => t.n(),
            Self::Decomposed(d) => d.n(),
        }
    }

    pub fn m(&self) -> u32 {
        match self {
            Self::Monolithic(t) => t.m(),
            Self::Decomposed(d) => d.m(),
        }
    }

    /// Stage-2 MUXes needed per chunk (two when decomposed).
    pub fn muxes_per_chunk(&self) -> u64 {
        match self {
            Self::Monolithic(_) => 1,
            Self::Decomposed(_) => 2,
        }
    }

    /// Total static-table entries backing this mode.
    pub fn stored_entries(&self) -> u64 {
        let keys = 1u64 << self.n();
        match self {
            Self::Monolithic(t) => t.line_count() * keys,
            Self::Decomposed(d) => d.line_count() * keys,
        }
    }

    /// Stage-1 selection for a full-width line index.
    pub fn select(
        &self,
        line_index: u64,
        counts: &mut CycleCount,
    ) -> Result<SelectedLine<'_>, MpuError> {
        counts.memory_bits_read += (self.n() * self.m()) as u64;
        match self {
            Self::Monolithic(t) => Ok(SelectedLine::Single(stage1_select(t, line_index, counts)?)),
            Self::Decomposed(d) => {
                let lines = 1u64 << (d.n() * d.m());
                if line_index >= lines {
                    return Err(TableError::BadLineIndex {
                        index: line_index,
                        lines,
                    }
                    .into());
                }
                let (hi, lo) = d.split_index(line_index);
                Ok(SelectedLine::Split {
                    hi: stage1_select(d.hi(), hi, counts)?,
                    lo: stage1_select(d.lo(), lo, counts)?,
                    shift: d.shift(),
                })
            }
        }
    }
}

/// A line held at the stage-1 output.
#[derive(Debug, Clone, Copy)]
pub enum SelectedLine<'a> {
    Single(&'a [i32]),
    Split {
        hi: &'a [i32],
        lo: &'a [i32],
        shift: u32,
    },
}

impl SelectedLine<'_> {
    /// Stage-2 selection; a split line recombines as `hi << shift + lo`.
    pub fn select(&self, key: u32, counts: &mut CycleCount) -> i64 {
        match *self {
            SelectedLine::Single(line) => stage2_select(line, key, counts) as i64,
            SelectedLine::Split { hi, lo, shift } => {
                let h = stage2_select(hi, key, counts) as i64;
                let l = stage2_select(lo, key, counts) as i64;
                counts.adder_ops += 1;
                (h << shift) + l
            }
        }
    }
}

/// One stage-2 selection in the execution trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub cycle: u64,
    pub group: u64,
    pub bitplane: u32,
    pub key: u32,
    pub selected: i64,
    pub accumulator: i64,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.cycle, self.group, self.bitplane, self.key, self.selected, self.accumulator
        )
    }
}

/// Weight-memory addresses held during one batch of parallel groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchAccess {
    pub cycles: u64,
    pub addresses: Vec<u64>,
}

/// A single processing engine: configuration plus its counters.
#[derive(Debug, Clone)]
pub struct MpuEngine {
    cfg: MpuConfig,
    counts: CycleCount,
    groups_issued: u64,
    trace: Option<Vec<TraceRecord>>,
    access: Vec<BatchAccess>,
    pending: Vec<u64>,
    pending_groups: u32,
}

impl MpuEngine {
    pub fn new(cfg: MpuConfig) -> Result<Self, MpuError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            counts: CycleCount::default(),
            groups_issued: 0,
            trace: None,
            access: Vec::new(),
            pending: Vec::new(),
            pending_groups: 0,
        })
    }

    pub fn config(&self) -> &MpuConfig {
        &self.cfg
    }

    /// Switches the activation interpretation between layers.
    pub fn set_activation_sign(&mut self, sign: ActivationSign) {
        self.cfg.activation_sign = sign;
    }

    /// Switches the weight code width between layers.
    pub fn set_mode(&mut self, m: u32) -> Result<(), MpuError> {
        let cfg = MpuConfig { m, ..self.cfg };
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    pub fn counts(&self) -> CycleCount {
        self.counts
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Per-batch weight-memory accesses recorded so far.
    pub fn take_access_trace(&mut self) -> Vec<BatchAccess> {
        self.flush_batch();
        std::mem::take(&mut self.access)
    }

    pub fn reset_counts(&mut self) {
        self.counts = CycleCount::default();
        self.groups_issued = 0;
        self.access.clear();
        self.pending.clear();
        self.pending_groups = 0;
        if let Some(t) = self.trace.as_mut() {
            t.clear();
        }
    }

    fn check_table(&self, table: &WeightTable) -> Result<(), MpuError> {
        if table.n() != self.cfg.n || table.m() != self.cfg.m {
            return Err(TableError::ModeMismatch {
                n: self.cfg.n,
                m: self.cfg.m,
                got_n: table.n(),
                got_m: table.m(),
            }
            .into());
        }
        Ok(())
    }

    fn check_activations(&self, acts: &[i64]) -> Result<(), MpuError> {
        let (lo, hi) = self.cfg.activation_range();
        if let Some(pos) = acts.iter().position(|x| !(lo..=hi).contains(x)) {
            return Err(MpuError::ActivationOutOfRange {
                pos,
                value: acts[pos],
                bits: self.cfg.activation_bits,
                sign: self.cfg.activation_sign,
            });
        }
        Ok(())
    }

    fn flush_batch(&mut self) {
        if self.pending_groups == 0 {
            return;
        }
        let mut addresses = std::mem::take(&mut self.pending);
        addresses.sort_unstable();
        addresses.dedup();
        self.access.push(BatchAccess {
            cycles: self.cfg.activation_bits as u64,
            addresses,
        });
        self.pending_groups = 0;
    }

    /// Runs one group: up to `chunks_per_group` weight chunks against their
    /// activations, bit-plane by bit-plane (LSB first).
    ///
    /// `addresses` are the weight-memory addresses of the chunk indices.
    fn run_group(
        &mut self,
        table: &WeightTable,
        indices: &[u64],
        addresses: impl Iterator<Item = u64>,
        acts: &[i64],
    ) -> Result<i64, MpuError> {
        let n = self.cfg.n as usize;
        let bits = self.cfg.activation_bits;
        let width = self.cfg.accumulator_width();
        let limit = 1i64 << (width - 1);
        let group = self.groups_issued;
        let batch = group / self.cfg.groups as u64;
        let cycle_base = batch * bits as u64;

        let mut lines = Vec::with_capacity(indices.len());
        for &index in indices {
            lines.push(table.select(index, &mut self.counts)?);
        }
        self.pending.extend(addresses);

        let signed = self.cfg.activation_sign == ActivationSign::TwosComplement;
        let mut acc = 0i64;
        for b in 0..bits {
            let negate = signed && b == bits - 1;
            for (j, line) in lines.iter().enumerate() {
                let key = acts[j * n..(j + 1) * n]
                    .iter()
                    .enumerate()
                    .fold(0u32, |k, (i, &x)| k | ((((x >> b) & 1) as u32) << i));
                let selected = line.select(key, &mut self.counts);
                let shifted = selected << b;
                acc = if negate { acc - shifted } else { acc + shifted };
                self.counts.adder_ops += 1;
                if acc >= limit || acc < -limit {
                    return Err(MpuError::AccumulatorOverflow { value: acc, width });
                }
                if let Some(trace) = self.trace.as_mut() {
                    trace.push(TraceRecord {
                        cycle: cycle_base + b as u64,
                        group,
                        bitplane: b,
                        key,
                        selected,
                        accumulator: acc,
                    });
                }
            }
        }

        self.groups_issued += 1;
        self.pending_groups += 1;
        if self.groups_issued.is_multiple_of(self.cfg.groups as u64) {
            self.counts.cycles += bits as u64;
            self.flush_batch();
        }
        Ok(acc)
    }

    /// Closes a partially filled batch so its cycles are counted.
    fn finish_batch(&mut self) {
        let groups = self.cfg.groups as u64;
        let rem = self.groups_issued % groups;
        if rem != 0 {
            self.groups_issued += groups - rem;
            self.counts.cycles += self.cfg.activation_bits as u64;
        }
        self.flush_batch();
    }

    /// One group inner product of `group_vector_len` elements.
    ///
    /// `weights` holds `group_vector_len / n` vectors of `n` codes each.
    pub fn bitserial_inner_product(
        &mut self,
        weights: &[QuantizedWeightVector],
        activations: &[i64],
        table: &WeightTable,
    ) -> Result<i64, MpuError> {
        self.check_table(table)?;
        let len = self.cfg.group_vector_len as usize;
        if activations.len() != len {
            return Err(MpuError::ShapeError(format!(
                "expected {len} activations, got {}",
                activations.len()
            )));
        }
        if weights.len() * self.cfg.n as usize != len {
            return Err(MpuError::ShapeError(format!(
                "expected {} weight chunks, got {}",
                self.cfg.chunks_per_group(),
                weights.len()
            )));
        }
        self.check_activations(activations)?;
        let indices = weights
            .iter()
            .map(|w| table_index(table, w))
            .collect::<Result<Vec<_>, _>>()?;
        let out = self.run_group(table, &indices, 0..indices.len() as u64, activations)?;
        self.finish_batch();
        Ok(out)
    }

    /// Evaluates every output row against every input patch.
    ///
    /// `indices` is row-major `[rows][chunks_per_row]`; each patch holds
    /// `chunks_per_row * n` activations. Rows are split into groups of
    /// `chunks_per_group` chunks whose results are merged by an adder tree.
    /// Returns `[patch][row]`. `base_address` places the first index in
    /// weight memory for access tracking.
    pub fn pe_forward(
        &mut self,
        indices: &[u64],
        chunks_per_row: usize,
        patches: &[Vec<i64>],
        table: &WeightTable,
        base_address: u64,
    ) -> Result<Vec<Vec<i64>>, MpuError> {
        self.check_table(table)?;
        let n = self.cfg.n as usize;
        if chunks_per_row == 0 || !indices.len().is_multiple_of(chunks_per_row) {
            return Err(MpuError::ShapeError(format!(
                "{} indices do not form rows of {chunks_per_row} chunks",
                indices.len()
            )));
        }
        let row_len = chunks_per_row * n;
        for (p, patch) in patches.iter().enumerate() {
            if patch.len() != row_len {
                return Err(MpuError::ShapeError(format!(
                    "patch {p} has {} activations, rows need {row_len}",
                    patch.len()
                )));
            }
            self.check_activations(patch)?;
        }
        let rows = indices.len() / chunks_per_row;
        let per_group = self.cfg.chunks_per_group() as usize;
        let mut out = Vec::with_capacity(patches.len());
        let mut partials = Vec::with_capacity(chunks_per_row.div_ceil(per_group));
        for patch in patches {
            let mut row_out = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &indices[r * chunks_per_row..(r + 1) * chunks_per_row];
                let row_base = base_address + (r * chunks_per_row) as u64;
                partials.clear();
                for (g, chunk) in row.chunks(per_group).enumerate() {
                    let first = g * per_group;
                    let acts = &patch[first * n..(first + chunk.len()) * n];
                    let addrs = (0..chunk.len() as u64).map(|j| row_base + (first as u64) + j);
                    partials.push(self.run_group(table, chunk, addrs, acts)?);
                }
                row_out.push(adder_tree(&partials, &mut self.counts));
            }
            out.push(row_out);
        }
        self.finish_batch();
        Ok(out)
    }
}

fn table_index(table: &WeightTable, w: &QuantizedWeightVector) -> Result<u64, MpuError> {
    Ok(crate::static_table::line_index_of(w, table.n(), table.m())?)
}

/// Pairwise binary reduction; counts one adder op per internal node.
pub fn adder_tree(values: &[i64], counts: &mut CycleCount) -> i64 {
    match values.len() {
        0 => 0,
        1 => values[0],
        len => {
            let (l, r) = values.split_at(len / 2);
            let sum = adder_tree(l, counts) + adder_tree(r, counts);
            counts.adder_ops += 1;
            sum
        }
    }
}

/// Convenience wrapper: one group inner product on a fresh engine.
pub fn bitserial_inner_product(
    weights: &[QuantizedWeightVector],
    activations: &[i64],
    cfg: MpuConfig,
    table: &WeightTable,
) -> Result<(i64, CycleCount), MpuError> {
    let mut engine = MpuEngine::new(cfg)?;
    let out = engine.bitserial_inner_product(weights, activations, table)?;
    Ok((out, engine.counts()))
}
