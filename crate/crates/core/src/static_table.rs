//! The static table (ST): every inner-product-compatible line for a given
//! vector length `n` and code width `m`.
//!
//! Line `l` is addressed by the concatenation of `n` two's-complement `m`-bit
//! fields, `code[0]` in the least-significant field. Entry `k` of a line is
//! the subset sum of the codes whose bit is set in key `k` (bit `i` of the
//! key selects `code[i]`). Entry 0 is therefore always 0.

use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

use crate::quantizer::{QuantizedWeightVector, MAX_ENUMERATION_BITS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("table with n*m = {0} bits exceeds the enumeration budget of {MAX_ENUMERATION_BITS}")]
    EnumerationTooLarge(u32),
    #[error("invalid table shape n={n}, m={m}")]
    BadShape { n: u32, m: u32 },
    #[error("weight vector is n={got_n}, m={got_m} but the table is n={n}, m={m}")]
    ModeMismatch { n: u32, m: u32, got_n: u32, got_m: u32 },
    #[error("odd code width m={0} cannot be split evenly")]
    OddSplitUnsupported(u32),
    #[error("line index {index} outside a table of {lines} lines")]
    BadLineIndex { index: u64, lines: u64 },
}

/// How an `m`-bit field of the line index is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldSign {
    Signed,
    Unsigned,
}

impl FieldSign {
    fn decode(self, field: u64, m: u32) -> i32 {
        match self {
            FieldSign::Unsigned => field as i32,
            FieldSign::Signed => {
                let shift = 64 - m;
                (((field << shift) as i64) >> shift) as i32
            }
        }
    }
}

/// Number of IPC lines for `(n, m)`: one per distinct code vector, `2^(n*m)`.
pub fn ipc_line_count(n: u32, m: u32) -> u128 {
    let bits = n * m;
    assert!(bits < 128, "2^{bits} does not fit in u128");
    1u128 << bits
}

/// Line index of a weight vector: its codes as concatenated `m`-bit fields.
pub fn line_index_of(weights: &QuantizedWeightVector, n: u32, m: u32) -> Result<u64, TableError> {
    let (got_n, got_m) = (weights.n() as u32, weights.m());
    if got_n != n || got_m != m {
        return Err(TableError::ModeMismatch { n, m, got_n, got_m });
    }
    Ok(pack_codes(weights.codes(), m))
}

/// Packs codes into a line index without width checks; fields are masked.
pub fn pack_codes(codes: &[i32], m: u32) -> u64 {
    let mask = field_mask(m);
    codes
        .iter()
        .rev()
        .fold(0u64, |acc, &c| (acc << m) | (c as i64 as u64 & mask))
}

/// Inverse of [`pack_codes`] for signed fields.
pub fn codes_of_line(index: u64, n: u32, m: u32) -> Vec<i32> {
    unpack(index, n, m, FieldSign::Signed)
}

fn unpack(index: u64, n: u32, m: u32, sign: FieldSign) -> Vec<i32> {
    let mask = field_mask(m);
    (0..n)
        .map(|i| sign.decode((index >> (i * m)) & mask, m))
        .collect()
}

fn field_mask(m: u32) -> u64 {
    if m >= 64 {
        u64::MAX
    } else {
        (1u64 << m) - 1
    }
}

fn ceil_log2(x: u32) -> u32 {
    if x <= 1 {
        0
    } else {
        32 - (x - 1).leading_zeros()
    }
}

/// An enumerated static table.
#[derive(Clone, PartialEq, Eq)]
pub struct StaticTable {
    n: u32,
    m: u32,
    sign: FieldSign,
    entries: Vec<i32>,
}

impl fmt::Debug for StaticTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StaticTable")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("sign", &self.sign)
            .field("lines", &self.line_count())
            .finish()
    }
}

/// Builds the signed static table for `(n, m)`.
pub fn build_static_table(n: u32, m: u32) -> Result<StaticTable, TableError> {
    StaticTable::build(n, m, FieldSign::Signed)
}

impl StaticTable {
    pub fn build(n: u32, m: u32, sign: FieldSign) -> Result<Self, TableError> {
        if n == 0 || m == 0 || m > 31 {
            return Err(TableError::BadShape { n, m });
        }
        let bits = n.saturating_mul(m);
        if bits > MAX_ENUMERATION_BITS {
            return Err(TableError::EnumerationTooLarge(bits));
        }
        let keys = 1usize << n;
        let lines = 1usize << bits;
        let mut entries = vec![0i32; lines * keys];
        for (line, row) in entries.chunks_exact_mut(keys).enumerate() {
            let codes = unpack(line as u64, n, m, sign);
            // Each key extends the key with its lowest set bit cleared.
            for k in 1..keys {
                let low = k.trailing_zeros() as usize;
                row[k] = row[k & (k - 1)] + codes[low];
            }
        }
        Ok(Self {
            n,
            m,
            sign,
            entries,
        })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn sign(&self) -> FieldSign {
        self.sign
    }

    pub fn line_count(&self) -> u64 {
        1u64 << (self.n * self.m)
    }

    pub fn keys_per_line(&self) -> usize {
        1usize << self.n
    }

    /// Signed width that holds every entry exactly: `m + ceil(log2 n) + 1`.
    pub fn entry_width(&self) -> u32 {
        self.m + ceil_log2(self.n) + 1
    }

    pub fn line(&self, index: u64) -> Result<&[i32], TableError> {
        if index >= self.line_count() {
            return Err(TableError::BadLineIndex {
                index,
                lines: self.line_count(),
            });
        }
        let keys = self.keys_per_line();
        let start = index as usize * keys;
        Ok(&self.entries[start..start + keys])
    }

    /// Entry `key` of line `index`; the key is masked to `n` bits.
    pub fn entry(&self, index: u64, key: u32) -> Result<i32, TableError> {
        let line = self.line(index)?;
        Ok(line[key as usize & (line.len() - 1)])
    }

    /// Decodes a line index back to its codes using this table's field sign.
    pub fn codes_of_line(&self, index: u64) -> Vec<i32> {
        unpack(index, self.n, self.m, self.sign)
    }

    pub fn line_index_of(&self, weights: &QuantizedWeightVector) -> Result<u64, TableError> {
        line_index_of(weights, self.n, self.m)
    }

    /// Overwrites one entry. Used to inject faults when exercising the
    /// verification suites.
    #[doc(hidden)]
    pub fn perturb_entry(&mut self, index: u64, key: u32, delta: i32) {
        let keys = self.keys_per_line();
        let pos = index as usize * keys + (key as usize & (keys - 1));
        self.entries[pos] = self.entries[pos].wrapping_add(delta);
    }

    /// Writes the diagnostic dump: `<line_index> : <e0> <e1> ...` per line.
    pub fn dump<W: Write>(&self, mut out: W) -> io::Result<()> {
        let keys = self.keys_per_line();
        for (index, row) in self.entries.chunks_exact(keys).enumerate() {
            write!(out, "{index} :")?;
            for e in row {
                write!(out, " {e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// An `m`-bit table realized as a signed high half and an unsigned low half.
///
/// A code `c` splits into `hi = c >> shift` (signed, `m - shift` bits) and
/// `lo = c & (2^shift - 1)` (unsigned), so every subset sum satisfies
/// `sum = hi_sum * 2^shift + lo_sum`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecomposedTable {
    n: u32,
    m: u32,
    hi: StaticTable,
    lo: StaticTable,
    shift: u32,
}

/// Splits `(n, m)` into two half-width tables.
pub fn decompose_table(m: u32, n: u32) -> Result<DecomposedTable, TableError> {
    if !m.is_multiple_of(2) {
        return Err(TableError::OddSplitUnsupported(m));
    }
    if m == 0 || n == 0 {
        return Err(TableError::BadShape { n, m });
    }
    let m_hi = m / 2;
    let m_lo = m - m_hi;
    Ok(DecomposedTable {
        n,
        m,
        hi: StaticTable::build(n, m_hi, FieldSign::Signed)?,
        lo: StaticTable::build(n, m_lo, FieldSign::Unsigned)?,
        shift: m_lo,
    })
}

impl DecomposedTable {
    pub fn n(&self) -> u32 {
        self.n
    }

    /// Width of the full codes this pair represents.
    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn hi(&self) -> &StaticTable {
        &self.hi
    }

    pub fn lo(&self) -> &StaticTable {
        &self.lo
    }

    pub fn shift(&self) -> u32 {
        self.shift
    }

    pub fn hi_mut(&mut self) -> &mut StaticTable {
        &mut self.hi
    }

    pub fn lo_mut(&mut self) -> &mut StaticTable {
        &mut self.lo
    }

    /// Splits a full-width line index into `(hi_index, lo_index)`.
    pub fn split_index(&self, index: u64) -> (u64, u64) {
        let (m_hi, m_lo) = (self.hi.m, self.lo.m);
        let full = field_mask(self.m);
        let lo_mask = field_mask(m_lo);
        let mut hi_index = 0u64;
        let mut lo_index = 0u64;
        for i in 0..self.n {
            let field = (index >> (i * self.m)) & full;
            lo_index |= (field & lo_mask) << (i * m_lo);
            hi_index |= (field >> m_lo) << (i * m_hi);
        }
        (hi_index, lo_index)
    }

    /// `hi_entry * 2^shift + lo_entry` for the line `index` and `key`.
    pub fn combined_entry(&self, index: u64, key: u32) -> Result<i64, TableError> {
        if index >= 1u64 << (self.n * self.m) {
            return Err(TableError::BadLineIndex {
                index,
                lines: 1u64 << (self.n * self.m),
            });
        }
        let (hi, lo) = self.split_index(index);
        Ok(((self.hi.entry(hi, key)? as i64) << self.shift) + self.lo.entry(lo, key)? as i64)
    }

    /// Lines stored across both halves.
    pub fn line_count(&self) -> u64 {
        self.hi.line_count() + self.lo.line_count()
    }
}
