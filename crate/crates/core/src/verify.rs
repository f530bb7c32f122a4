//! Bit-exactness suites: every datapath against an independent oracle.
//!
//! Each suite reports how many cases it ran and the first mismatch, if any.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::compiler::CompiledModel;
use crate::frontend::{cic_decimate, CicConfig};
use crate::inference::{reference_forward, ModelEngine, TableCache};
use crate::mpu::{ActivationSign, MpuConfig, MpuEngine, WeightTable};
use crate::quantizer::{QParams, QuantizedWeightVector};
use crate::static_table::{codes_of_line, decompose_table, FieldSign, StaticTable};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub cases: u64,
    pub mismatches: u64,
    pub first_counterexample: Option<String>,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<5} {:<24} cases={} mismatches={} ({:.2}s)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.mismatches,
            self.seconds
        )?;
        if let Some(c) = &self.first_counterexample {
            write!(f, "\n      first counterexample: {c}")?;
        }
        Ok(())
    }
}

/// Adds `delta` to entry `key` of line `line` in the table for width `m`.
/// For a decomposed table the line indexes the high half.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub m: u32,
    pub line: u64,
    pub key: u32,
    pub delta: i32,
}

impl Fault {
    /// A single corrupted entry in the small exhaustive table.
    pub fn default_small() -> Self {
        Self {
            m: 3,
            line: 5,
            key: 3,
            delta: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub seed: u64,
    pub random_cases: u64,
    pub decomposition_lines: u64,
    pub cic_samples: usize,
    pub model_inputs: u64,
    pub fault: Option<Fault>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            random_cases: 100_000,
            decomposition_lines: 10_000,
            cic_samples: 10_000,
            model_inputs: 100,
            fault: None,
        }
    }
}

struct Tally {
    name: String,
    cases: u64,
    mismatches: u64,
    first: Option<String>,
    start: Instant,
}

impl Tally {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            cases: 0,
            mismatches: 0,
            first: None,
            start: Instant::now(),
        }
    }

    fn check<T: PartialEq + fmt::Debug>(&mut self, got: T, want: T, ctx: impl FnOnce() -> String) {
        self.cases += 1;
        if got != want {
            self.mismatches += 1;
            if self.first.is_none() {
                self.first = Some(format!("{} got={got:?} expected={want:?}", ctx()));
            }
        }
    }

    fn fail(&mut self, msg: String) {
        self.cases += 1;
        self.mismatches += 1;
        self.first.get_or_insert(msg);
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            cases: self.cases,
            mismatches: self.mismatches,
            first_counterexample: self.first,
            seconds: self.start.elapsed().as_secs_f64(),
        }
    }
}

pub fn mac(codes: &[i32], acts: &[i64]) -> i64 {
    codes.iter().zip(acts).map(|(&w, &x)| w as i64 * x).sum()
}

fn apply_fault(table: &mut WeightTable, fault: Option<Fault>) {
    let Some(f) = fault else { return };
    if table.m() != f.m {
        return;
    }
    match table {
        WeightTable::Monolithic(t) => t.perturb_entry(f.line, f.key, f.delta),
        WeightTable::Decomposed(d) => d.hi_mut().perturb_entry(f.line, f.key, f.delta),
    }
}

fn table_for(n: u32, m: u32, fault: Option<Fault>) -> Result<WeightTable, String> {
    let mut t = WeightTable::for_mode(n, m).map_err(|e| e.to_string())?;
    apply_fault(&mut t, fault);
    Ok(t)
}

fn vectors(codes: &[i32], n: usize, m: u32) -> Vec<QuantizedWeightVector> {
    let q = QParams::new(m, 1.0).expect("valid width");
    codes
        .chunks(n)
        .map(|c| QuantizedWeightVector::from_codes(c.to_vec(), q).expect("codes in range"))
        .collect()
}

/// Number of cases in the small exhaustive suite: `2^(n*m) * 4^n`.
pub const SMALL_EXHAUSTIVE_CASES: u64 = (1 << 6) * 16;

/// n=2, m=3, 4-bit unsigned engine; every weight-code pair against every
/// activation pair in `0..4`.
pub fn exhaustive_small(fault: Option<Fault>) -> SuiteResult {
    let mut t = Tally::new("exhaustive n=2 m=3");
    let (n, m) = (2u32, 3u32);
    let table = match table_for(n, m, fault) {
        Ok(t) => t,
        Err(e) => {
            let mut tally = t;
            tally.fail(e);
            return tally.finish();
        }
    };
    let cfg = MpuConfig {
        n,
        m,
        groups: 1,
        group_vector_len: n,
        activation_bits: 4,
        activation_sign: ActivationSign::Unsigned,
    };
    let mut engine = MpuEngine::new(cfg).expect("valid config");
    for line in 0..1u64 << (n * m) {
        let codes = codes_of_line(line, n, m);
        let w = vectors(&codes, n as usize, m);
        for a0 in 0..4i64 {
            for a1 in 0..4i64 {
                let acts = [a0, a1];
                match engine.bitserial_inner_product(&w, &acts, &table) {
                    Ok(got) => t.check(got, mac(&codes, &acts), || format!("codes={codes:?} acts={acts:?}")),
                    Err(e) => t.fail(format!("codes={codes:?} acts={acts:?} error: {e}")),
                }
            }
        }
    }
    t.finish()
}

/// Random 8-element group inner products on the standard engine with
/// signed 8-bit activations.
pub fn random_group(m: u32, cases: u64, seed: u64, fault: Option<Fault>) -> SuiteResult {
    let mut t = Tally::new(&format!("random n=2 m={m}"));
    let table = match table_for(2, m, fault) {
        Ok(t) => t,
        Err(e) => {
            let mut tally = t;
            tally.fail(e);
            return tally.finish();
        }
    };
    let cfg = MpuConfig::standard(m, ActivationSign::TwosComplement);
    let len = cfg.group_vector_len as usize;
    let (lo, hi) = (-(1i32 << (m - 1)), (1i32 << (m - 1)) - 1);
    let mut engine = MpuEngine::new(cfg).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ m as u64);
    let mut codes = vec![0i32; len];
    let mut acts = vec![0i64; len];
    for case in 0..cases {
        // Every 16th case pins everything to the extremes.
        if case % 16 == 0 {
            let corner = (case / 16) % 4;
            codes.fill(if corner & 1 == 0 { lo } else { hi });
            acts.fill(if corner & 2 == 0 { -128 } else { 127 });
        } else {
            codes.iter_mut().for_each(|c| *c = rng.random_range(lo..=hi));
            acts.iter_mut().for_each(|a| *a = rng.random_range(-128..=127));
        }
        let w = vectors(&codes, 2, m);
        match engine.bitserial_inner_product(&w, &acts, &table) {
            Ok(got) => t.check(got, mac(&codes, &acts), || format!("codes={codes:?} acts={acts:?}")),
            Err(e) => t.fail(format!("codes={codes:?} acts={acts:?} error: {e}")),
        }
        if case % 4096 == 0 {
            engine.reset_counts();
        }
    }
    t.finish()
}

/// Decomposed tables against monolithic ones: exhaustive at m=6, sampled
/// lines at m=10. Every key of every checked line is compared.
pub fn decomposition(lines: u64, seed: u64, fault: Option<Fault>) -> SuiteResult {
    let mut t = Tally::new("decomposition n=2");
    let n = 2u32;
    let keys = 1u32 << n;
    for m in [6u32, 10] {
        let mono = match StaticTable::build(n, m, FieldSign::Signed) {
            Ok(x) => x,
            Err(e) => {
                t.fail(e.to_string());
                continue;
            }
        };
        let mut dec = decompose_table(m, n).expect("even width");
        if let Some(f) = fault.filter(|f| f.m == m) {
            dec.hi_mut().perturb_entry(f.line, f.key, f.delta);
        }
        let total = 1u64 << (n * m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(m as u64));
        let picks: Vec<u64> = if m == 6 {
            (0..total).collect()
        } else {
            (0..lines).map(|_| rng.random_range(0..total)).collect()
        };
        for line in picks {
            for key in 0..keys {
                let want = mono.entry(line, key).map(i64::from);
                let got = dec.combined_entry(line, key);
                match (got, want) {
                    (Ok(g), Ok(w)) => t.check(g, w, || format!("m={m} line={line} key={key}")),
                    (g, w) => t.fail(format!("m={m} line={line} key={key}: {g:?} vs {w:?}")),
                }
            }
        }
    }
    t.finish()
}

/// Direct-form CIC: `order` cascaded moving sums over `R*M` samples,
/// keeping every `R`-th output from index `R - 1`.
pub fn cic_fir_reference(x: &[i64], cfg: CicConfig) -> Vec<i64> {
    let len = (cfg.decimation * cfg.differential_delay) as usize;
    let mut y = x.to_vec();
    for _ in 0..cfg.order {
        let mut out = Vec::with_capacity(y.len());
        let mut window = 0i64;
        for i in 0..y.len() {
            window += y[i];
            if i >= len {
                window -= y[i - len];
            }
            out.push(window);
        }
        y = out;
    }
    y.into_iter()
        .skip(cfg.decimation as usize - 1)
        .step_by(cfg.decimation as usize)
        .collect()
}

/// Every (N, R, M) in {1,2,3} x {2,4,8} x {1,2} on random 16-bit input,
/// plus the DC gain on a constant input.
pub fn cic(samples: usize, seed: u64) -> SuiteResult {
    let mut t = Tally::new("cic vs fir");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for order in 1..=3 {
        for decimation in [2u32, 4, 8] {
            for differential_delay in [1u32, 2] {
                let cfg = CicConfig {
                    order,
                    decimation,
                    differential_delay,
                    input_bits: 16,
                };
                let x: Vec<i64> = (0..samples).map(|_| rng.random_range(-32768..32768)).collect();
                let ctx = || format!("N={order} R={decimation} M={differential_delay}");
                match cic_decimate(&x, cfg) {
                    Ok(got) => {
                        let want = cic_fir_reference(&x, cfg);
                        t.check(got.len(), want.len(), ctx);
                        if let Some(i) = got.iter().zip(&want).position(|(a, b)| a != b) {
                            t.check(got[i], want[i], || format!("{} output {i}", ctx()));
                        } else {
                            t.cases += got.len() as u64 - 1;
                        }
                    }
                    Err(e) => t.fail(format!("{}: {e}", ctx())),
                }
                let dc = cic_decimate(&vec![3; 64 * decimation as usize], cfg).unwrap_or_default();
                t.check(dc.last().copied(), Some(3 * cfg.dc_gain()), || format!("{} dc gain", ctx()));
            }
        }
    }
    t.finish()
}

/// Whole-model inference through the MUX engine against plain integer MAC
/// on random in-range inputs.
pub fn model_equivalence(model: &CompiledModel, inputs: u64, seed: u64, fault: Option<Fault>) -> SuiteResult {
    let mut t = Tally::new("model engine vs reference");
    let mut cache = TableCache::default();
    for m in model.layers.iter().map(|l| l.mode_m) {
        match table_for(model.header.n, m, fault) {
            Ok(table) => cache.insert(table),
            Err(e) => t.fail(e),
        }
    }
    let mut engine = match ModelEngine::with_tables(model, &mut cache) {
        Ok(e) => e,
        Err(e) => {
            t.fail(e.to_string());
            return t.finish();
        }
    };
    let (lo, hi) = model.layers[0].input_sign.range(model.header.activation_bits);
    let len = (model.header.input_channels * model.header.input_len) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..inputs {
        let x: Vec<i64> = (0..len).map(|_| rng.random_range(lo..=hi)).collect();
        match (engine.forward(model, &x), reference_forward(model, &x)) {
            (Ok(a), Ok(b)) => t.check(a, b, || format!("input #{i}")),
            (a, b) => t.fail(format!("input #{i}: {a:?} vs {b:?}")),
        }
    }
    t.finish()
}

/// All suites; the model suite runs only when a model is given.
pub fn run_all(cfg: &VerifyConfig, model: Option<&CompiledModel>) -> Vec<SuiteResult> {
    let mut out = vec![
        exhaustive_small(cfg.fault),
        random_group(5, cfg.random_cases, cfg.seed, cfg.fault),
        random_group(10, cfg.random_cases, cfg.seed, cfg.fault),
        decomposition(cfg.decomposition_lines, cfg.seed, cfg.fault),
        cic(cfg.cic_samples, cfg.seed),
    ];
    if let Some(m) = model {
        out.push(model_equivalence(m, cfg.model_inputs, cfg.seed, cfg.fault));
    }
    out
}
