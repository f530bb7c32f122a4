//! Fixed-point weight codes, pre-scaled weight scaling and the level set
//! produced by exact subset sums.
//!
//! Weights are stored as `m`-bit two's-complement codes sharing one positive
//! scale per group (an output channel or a whole layer). The concatenation of
//! a vector's codes is the static-table line index, so the codes are the only
//! thing that reaches weight memory.

use std::collections::BTreeSet;

use thiserror::Error;

/// Largest `n * m` the enumerating helpers accept.
pub const MAX_ENUMERATION_BITS: u32 = 20;

/// Number of log-spaced points in the default pre-scale grid.
pub const DEFAULT_GRID_POINTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error("non-finite weight at position {0}")]
    NonFiniteWeight(usize),
    #[error("bit-width {0} outside the supported range 2..=32")]
    BadBitWidth(u32),
    #[error("scale must be finite and positive, got {0}")]
    BadScale(f64),
    #[error("code {code} at position {pos} does not fit in {m} bits")]
    CodeOutOfRange { pos: usize, code: i32, m: u32 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("enumeration of n*m = {0} bits exceeds the budget of {MAX_ENUMERATION_BITS}")]
    EnumerationTooLarge(u32),
}

/// Width and scale of a group of weight codes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QParams {
    m: u32,
    scale: f64,
}

impl QParams {
    pub fn new(m: u32, scale: f64) -> Result<Self, QuantError> {
        if !(2..=32).contains(&m) {
            return Err(QuantError::BadBitWidth(m));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(QuantError::BadScale(scale));
        }
        Ok(Self { m, scale })
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Inclusive signed code range `[-2^(m-1), 2^(m-1) - 1]`.
    pub fn code_range(&self) -> (i32, i32) {
        signed_range(self.m)
    }
}

/// Inclusive two's-complement range of a `bits`-wide signed field.
pub fn signed_range(bits: u32) -> (i32, i32) {
    let half = 1i64 << (bits - 1);
    (-half as i32, (half - 1) as i32)
}

/// `n` weight codes sharing one [`QParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeightVector {
    codes: Vec<i32>,
    qparams: QParams,
}

impl QuantizedWeightVector {
    /// Wraps already-quantized codes, checking that each fits in `m` bits.
    pub fn from_codes(codes: Vec<i32>, qparams: QParams) -> Result<Self, QuantError> {
        if codes.is_empty() {
            return Err(QuantError::Empty("weight vector"));
        }
        let (lo, hi) = qparams.code_range();
        if let Some(pos) = codes.iter().position(|c| !(lo..=hi).contains(c)) {
            return Err(QuantError::CodeOutOfRange {
                pos,
                code: codes[pos],
                m: qparams.m,
            });
        }
        Ok(Self { codes, qparams })
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn qparams(&self) -> QParams {
        self.qparams
    }

    pub fn n(&self) -> usize {
        self.codes.len()
    }

    pub fn m(&self) -> u32 {
        self.qparams.m
    }

    /// Bits this vector occupies in weight memory (`n * m`).
    pub fn memory_bits(&self) -> u64 {
        self.codes.len() as u64 * self.qparams.m as u64
    }
}

/// A single activation code with its bit-width and scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizedActivation {
    pub value: i64,
    pub bits: u32,
    pub scale: f64,
}

impl QuantizedActivation {
    /// Quantizes `x` to a signed `bits`-wide code at `scale`, saturating.
    pub fn quantize(x: f64, bits: u32, scale: f64) -> Self {
        let (lo, hi) = signed_range(bits);
        let value = ((x / scale).round() as i64).clamp(lo as i64, hi as i64);
        Self { value, bits, scale }
    }

    pub fn dequantize(&self) -> f64 {
        self.value as f64 * self.scale
    }
}

fn quantize_one(w: f64, scale: f64, lo: i32, hi: i32) -> i32 {
    // f64::round rounds half away from zero.
    let r = (w / scale).round();
    r.clamp(lo as f64, hi as f64) as i32
}

/// Quantizes real weights to `m`-bit codes at the given pre-scale.
///
/// `codes[i] = clamp(round(w[i] / scale))`, rounding half away from zero.
pub fn quantize_weights(
    weights: &[f64],
    m: u32,
    scale: f64,
) -> Result<QuantizedWeightVector, QuantError> {
    let qparams = QParams::new(m, scale)?;
    if weights.is_empty() {
        return Err(QuantError::Empty("weight vector"));
    }
    if let Some(pos) = weights.iter().position(|w| !w.is_finite()) {
        return Err(QuantError::NonFiniteWeight(pos));
    }
    let (lo, hi) = qparams.code_range();
    let codes = weights
        .iter()
        .map(|&w| quantize_one(w, scale, lo, hi))
        .collect();
    Ok(QuantizedWeightVector { codes, qparams })
}

/// Total squared reconstruction error of quantizing `weights` at `scale`.
pub fn quantization_sse(weights: &[f64], m: u32, scale: f64) -> f64 {
    let (lo, hi) = signed_range(m);
    weights
        .iter()
        .map(|&w| {
            let e = w - scale * quantize_one(w, scale, lo, hi) as f64;
            e * e
        })
        .sum()
}

/// The max-abs scale that maps the largest weight onto the top code.
pub fn max_abs_scale(weights: &[f64], m: u32) -> f64 {
    let max_abs = weights.iter().fold(0.0f64, |a, w| a.max(w.abs()));
    max_abs / ((1u64 << (m - 1)) - 1) as f64
}

/// Default search grid: [`DEFAULT_GRID_POINTS`] log-spaced scales over
/// `max|w| / 2^(m-1) * [0.5, 2.0]`, plus the max-abs scale itself.
///
/// All-zero weights fall back to a base of 1.0 since every scale is optimal.
pub fn default_prescale_grid(weights: &[f64], m: u32) -> Vec<f64> {
    let max_abs = weights.iter().fold(0.0f64, |a, w| a.max(w.abs()));
    if max_abs == 0.0 || !max_abs.is_finite() {
        return vec![1.0];
    }
    let base = max_abs / (1u64 << (m - 1)) as f64;
    let (lo, hi) = (base * 0.5, base * 2.0);
    let steps = (DEFAULT_GRID_POINTS - 1) as f64;
    let mut grid: Vec<f64> = (0..DEFAULT_GRID_POINTS)
        .map(|i| lo * (hi / lo).powf(i as f64 / steps))
        .collect();
    grid.push(max_abs_scale(weights, m));
    grid
}

/// Picks the grid scale with the smallest total squared quantization error.
///
/// Ties go to the smaller scale. All-zero weights return the smallest grid
/// scale.
pub fn choose_prescale(weights: &[f64], m: u32, grid: &[f64]) -> Result<f64, QuantError> {
    if weights.is_empty() {
        return Err(QuantError::Empty("weights"));
    }
    if grid.is_empty() {
        return Err(QuantError::Empty("search grid"));
    }
    if !(2..=32).contains(&m) {
        return Err(QuantError::BadBitWidth(m));
    }
    if let Some(pos) = weights.iter().position(|w| !w.is_finite()) {
        return Err(QuantError::NonFiniteWeight(pos));
    }
    if let Some(&bad) = grid.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(QuantError::BadScale(bad));
    }
    let smallest = grid.iter().copied().fold(f64::INFINITY, f64::min);
    if weights.iter().all(|&w| w == 0.0) {
        return Ok(smallest);
    }
    let mut best = (f64::INFINITY, f64::INFINITY);
    for &scale in grid {
        let err = quantization_sse(weights, m, scale);
        if err < best.0 || (err == best.0 && scale < best.1) {
            best = (err, scale);
        }
    }
    Ok(best.1)
}

/// `code_sum * w_scale * x_scale`.
pub fn dequantize_product(code_sum: i64, w_scale: f64, x_scale: f64) -> f64 {
    code_sum as f64 * w_scale * x_scale
}

/// Every value `sum_{i in S} c_i` reachable by some `m`-bit code vector `c`
/// of length `n` and some subset `S`.
///
/// Built incrementally: the reachable sums with `k + 1` selected weights are
/// the sums with `k` selected weights shifted by every single code.
pub fn effective_output_levels(n: u32, m: u32) -> Result<BTreeSet<i64>, QuantError> {
    let bits = n.saturating_mul(m);
    if bits > MAX_ENUMERATION_BITS {
        return Err(QuantError::EnumerationTooLarge(bits));
    }
    if n == 0 || !(1..=32).contains(&m) {
        return Err(QuantError::BadBitWidth(m));
    }
    let (lo, hi) = signed_range(m);
    let mut levels = BTreeSet::from([0i64]);
    let mut frontier = BTreeSet::from([0i64]);
    for _ in 0..n {
        let mut next = BTreeSet::new();
        for &s in &frontier {
            for c in lo..=hi {
                next.insert(s + c as i64);
            }
        }
        levels.extend(next.iter().copied());
        frontier = next;
    }
    Ok(levels)
}

/// Gap statistics of an effective level set against a uniform `m`-bit grid
/// spanning the same range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelGapStats {
    pub level_count: usize,
    pub mean_gap: f64,
    pub uniform_gap: f64,
}

impl LevelGapStats {
    /// `mean_gap / uniform_gap`; below 1 means finer resolution than the
    /// uniform grid.
    pub fn ratio(&self) -> f64 {
        self.mean_gap / self.uniform_gap
    }
}

pub fn level_gap_stats(n: u32, m: u32) -> Result<LevelGapStats, QuantError> {
    let levels = effective_output_levels(n, m)?;
    let min = *levels.first().expect("level set contains 0");
    let max = *levels.last().expect("level set contains 0");
    let span = (max - min) as f64;
    let mean_gap = if levels.len() > 1 {
        span / (levels.len() - 1) as f64
    } else {
        0.0
    };
    let uniform_gap = span / ((1u64 << m) - 1) as f64;
    Ok(LevelGapStats {
        level_count: levels.len(),
        mean_gap,
        uniform_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_weights(&[0.0, 0.0], 5, 1.0).unwrap().codes(), &[0, 0]);
        assert_eq!(quantize_weights(&[1.0, -2.0], 5, 0.5).unwrap().codes(), &[2, -4]);
        assert_eq!(quantize_weights(&[100.0], 5, 1.0).unwrap().codes(), &[15]);
        assert_eq!(quantize_weights(&[-100.0], 5, 1.0).unwrap().codes(), &[-16]);
    }

    #[test]
    fn rounds_half_away_from_zero() {
        let q = quantize_weights(&[0.5, -0.5, 1.5, -2.5], 5, 1.0).unwrap();
        assert_eq!(q.codes(), &[1, -1, 2, -3]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(
            quantize_weights(&[1.0, f64::NAN], 5, 1.0),
            Err(QuantError::NonFiniteWeight(1))
        );
        assert!(matches!(
            quantize_weights(&[1.0], 5, 0.0),
            Err(QuantError::BadScale(_))
        ));
        assert!(matches!(
            quantize_weights(&[1.0], 1, 1.0),
            Err(QuantError::BadBitWidth(1))
        ));
    }

    #[test]
    fn prescale_examples() {
        // m=3 codes lie in [-4, 3]: at 0.25 the +1 weight saturates to 0.75
        // (error 0.0625) while 1.0 is exact, so 1.0 wins.
        assert_eq!(quantization_sse(&[1.0, -1.0], 3, 0.25), 0.0625);
        assert_eq!(quantization_sse(&[1.0, -1.0], 3, 1.0), 0.0);
        assert_eq!(choose_prescale(&[1.0, -1.0], 3, &[0.25, 1.0]).unwrap(), 1.0);

        // Direct evaluation: scale 1.0 -> codes [0, 1], sse 0.09 + 0.09 = 0.18;
        // scale 0.1 -> codes [3, 3] (7 saturates), sse 0 + 0.16 = 0.16.
        let w = [0.3, 0.7];
        let e1 = (0.3f64).powi(2) + (0.7f64 - 1.0).powi(2);
        let e01 = (0.3f64 - 0.3).powi(2) + (0.7f64 - 0.3).powi(2);
        assert!((quantization_sse(&w, 3, 1.0) - e1).abs() < 1e-12);
        assert!((quantization_sse(&w, 3, 0.1) - e01).abs() < 1e-12);
        assert_eq!(choose_prescale(&w, 3, &[1.0, 0.1]).unwrap(), 0.1);

        assert_eq!(choose_prescale(&[0.0; 3], 5, &[0.5, 2.0]).unwrap(), 0.5);
    }

    #[test]
    fn prescale_tie_prefers_smaller_scale() {
        // Both scales represent the weights exactly.
        assert_eq!(choose_prescale(&[1.0, -1.0], 5, &[1.0, 0.5]).unwrap(), 0.5);
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize_product(0, 1.0, 1.0), 0.0);
        assert_eq!(dequantize_product(13, 0.5, 0.25), 1.625);
        assert_eq!(dequantize_product(-4, 2.0, 1.0), -8.0);
    }

    /// Every subset sum of every code vector, by exhaustive enumeration.
    fn brute_levels(n: u32, m: u32) -> BTreeSet<i64> {
        let (lo, hi) = signed_range(m);
        let width = (hi - lo + 1) as u64;
        let mut out = BTreeSet::new();
        for v in 0..width.pow(n) {
            let mut rest = v;
            let codes: Vec<i64> = (0..n)
                .map(|_| {
                    let c = lo as i64 + (rest % width) as i64;
                    rest /= width;
                    c
                })
                .collect();
            for subset in 0u32..(1 << n) {
                let s = (0..n as usize)
                    .filter(|&i| subset >> i & 1 == 1)
                    .map(|i| codes[i])
                    .sum();
                out.insert(s);
            }
        }
        out
    }

    #[test]
    fn level_examples() {
        let l = effective_output_levels(1, 2).unwrap();
        assert_eq!(l.into_iter().collect::<Vec<_>>(), vec![-2, -1, 0, 1]);
        let l = effective_output_levels(2, 2).unwrap();
        assert!(l.contains(&-4) && l.contains(&2));
        let stats = level_gap_stats(2, 2).unwrap();
        assert!(stats.mean_gap <= stats.uniform_gap);
    }

    #[test]
    fn levels_match_brute_force() {
        for n in 1..=4u32 {
            for m in 1..=(12 / n).min(6) {
                let fast = effective_output_levels(n, m).unwrap();
                let slow = brute_levels(n, m);
                assert_eq!(fast, slow, "n={n} m={m}");
                assert!((fast.len() as u128) <= (1u128 << n) << (n * m));
            }
        }
    }

    #[test]
    fn enumeration_budget() {
        assert_eq!(
            effective_output_levels(3, 7),
            Err(QuantError::EnumerationTooLarge(21))
        );
    }

    #[test]
    fn default_grid_contains_max_abs_scale() {
        let w = [0.3, -1.2, 0.8];
        let grid = default_prescale_grid(&w, 5);
        assert_eq!(grid.len(), DEFAULT_GRID_POINTS + 1);
        assert!(grid.contains(&max_abs_scale(&w, 5)));
        let base = 1.2 / 16.0;
        assert!((grid[0] - base * 0.5).abs() < 1e-15);
        assert!((grid[DEFAULT_GRID_POINTS - 1] - base * 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn code_round_trip(m in 2u32..=12, raw in any::<i32>(), scale in 1e-3f64..10.0) {
            let (lo, hi) = signed_range(m);
            let c = lo + raw.rem_euclid(hi - lo + 1);
            let q = quantize_weights(&[scale * c as f64], m, scale).unwrap();
            prop_assert_eq!(q.codes(), &[c]);
        }

        #[test]
        fn saturation_is_monotone(m in 2u32..=10, a in -100.0f64..100.0, d in 0.0f64..50.0, scale in 0.01f64..5.0) {
            let qa = quantize_weights(&[a], m, scale).unwrap().codes()[0];
            let qb = quantize_weights(&[a + d], m, scale).unwrap().codes()[0];
            prop_assert!(qb >= qa);
        }

        #[test]
        fn prescale_is_grid_optimal(
            w in prop::collection::vec(-4.0f64..4.0, 1..12),
            grid in prop::collection::vec(0.01f64..2.0, 1..10),
            m in 2u32..=8,
        ) {
            let s = choose_prescale(&w, m, &grid).unwrap();
            let best = quantization_sse(&w, m, s);
            for &g in &grid {
                prop_assert!(best <= quantization_sse(&w, m, g));
            }
        }
    }
}
