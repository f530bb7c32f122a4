//! Signal front-end and closed-loop stimulation.
//!
//! Raw samples pass through a CIC decimator, are cut into segments, voted
//! into epoch stages, and trigger per-channel PWM pulse trains. Time is kept
//! as an exact rational number of seconds so pulse edges land on their grid.

use std::collections::BTreeSet;
use std::io::{self, Write};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{epoch_stage, EpochResult, PipelineError, SegmentClassifier, SegmentConfig};

/// Seconds, exactly.
pub type Time = Ratio<i64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrontendError {
    #[error("invalid CIC configuration: {0}")]
    CicConfig(String),
    #[error("loop configuration is inconsistent: {0}")]
    LoopConfigError(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("bad signal stream: {0}")]
    BadSignal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CicConfig {
    pub order: u32,
    pub decimation: u32,
    pub differential_delay: u32,
    pub input_bits: u32,
}

impl Default for CicConfig {
    fn default() -> Self {
        Self {
            order: 3,
            decimation: 8,
            differential_delay: 1,
            input_bits: 16,
        }
    }
}

impl CicConfig {
    /// `input_bits + order * ceil(log2(R * M))`.
    pub fn register_width(&self) -> u32 {
        let rm = (self.decimation * self.differential_delay) as u64;
        let growth = 64 - (rm - 1).leading_zeros();
        self.input_bits + self.order * growth
    }

    /// DC gain `(R * M)^N`.
    pub fn dc_gain(&self) -> i64 {
        ((self.decimation * self.differential_delay) as i64).pow(self.order)
    }

    pub fn validate(&self) -> Result<(), FrontendError> {
        let err = |m: String| Err(FrontendError::CicConfig(m));
        if self.order == 0 {
            return err("order must be at least 1".into());
        }
        if self.decimation < 2 {
            return err("decimation must be at least 2".into());
        }
        if self.differential_delay == 0 {
            return err("differential delay must be at least 1".into());
        }
        if self.input_bits == 0 || self.register_width() > 64 {
            return err(format!(
                "register width {} outside 1..=64",
                self.register_width()
            ));
        }
        Ok(())
    }
}

/// Hogenauer decimator: integrators at the input rate in modular arithmetic,
/// combs at the output rate. Keeps state across calls.
#[derive(Debug, Clone)]
pub struct CicDecimator {
    cfg: CicConfig,
    width: u32,
    integrators: Vec<i64>,
    /// Per comb stage, the last `M` inputs (ring buffer).
    combs: Vec<Vec<i64>>,
    comb_pos: usize,
    phase: u32,
}

impl CicDecimator {
    pub fn new(cfg: CicConfig) -> Result<Self, FrontendError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            width: cfg.register_width(),
            integrators: vec![0; cfg.order as usize],
            combs: vec![vec![0; cfg.differential_delay as usize]; cfg.order as usize],
            comb_pos: 0,
            phase: 0,
        })
    }

    fn wrap(&self, v: i64) -> i64 {
        if self.width >= 64 {
            v
        } else {
            let shift = 64 - self.width;
            (v << shift) >> shift
        }
    }

    /// Feeds samples, returning every output completed by them.
    pub fn process(&mut self, input: &[i64]) -> Vec<i64> {
        let mut out = Vec::with_capacity(input.len() / self.cfg.decimation as usize + 1);
        for &x in input {
            let mut v = x;
            for acc in self.integrators.iter_mut() {
                *acc = acc.wrapping_add(v);
                v = *acc;
            }
            for acc in self.integrators.iter_mut() {
                let shift = 64 - self.width.min(64);
                if shift > 0 {
                    *acc = (*acc << shift) >> shift;
                }
            }
            self.phase += 1;
            if self.phase == self.cfg.decimation {
                self.phase = 0;
                let mut u = v;
                for delay in self.combs.iter_mut() {
                    let old = std::mem::replace(&mut delay[self.comb_pos], u);
                    u = u.wrapping_sub(old);
                }
                self.comb_pos = (self.comb_pos + 1) % self.cfg.differential_delay as usize;
                out.push(self.wrap(u));
            }
        }
        out
    }
}

/// One-shot decimation from zero state.
pub fn cic_decimate(input: &[i64], cfg: CicConfig) -> Result<Vec<i64>, FrontendError> {
    Ok(CicDecimator::new(cfg)?.process(input))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StimChannelConfig {
    pub channel: u32,
    pub trigger_classes: BTreeSet<u32>,
    pub pwm_freq_hz: f64,
    pub duty: f64,
    pub duration_s: f64,
}

impl Default for StimChannelConfig {
    fn default() -> Self {
        Self {
            channel: 0,
            trigger_classes: BTreeSet::new(),
            pwm_freq_hz: 10.0,
            duty: 0.1,
            duration_s: 1.0,
        }
    }
}

impl StimChannelConfig {
    pub fn validate(&self) -> Result<(), FrontendError> {
        let err = |m: String| Err(FrontendError::LoopConfigError(m));
        if self.channel > 1 {
            return err(format!("channel {} (only 0 and 1 exist)", self.channel));
        }
        if let Some(c) = self.trigger_classes.iter().find(|&&c| c > 9) {
            return err(format!("trigger class {c} outside 0..=9"));
        }
        if !(self.pwm_freq_hz.is_finite() && self.pwm_freq_hz > 0.0) {
            return err(format!("PWM frequency {}", self.pwm_freq_hz));
        }
        if !(self.duty > 0.0 && self.duty <= 1.0) {
            return err(format!("duty {} outside (0, 1]", self.duty));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return err(format!("duration {}", self.duration_s));
        }
        Ok(())
    }
}

/// Nearest small-denominator rational to a config value.
pub fn to_time(v: f64) -> Time {
    Ratio::approximate_float(v).unwrap_or_else(|| Ratio::from_integer(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PulseEvent {
    pub t_on: Time,
    pub t_off: Time,
    pub channel: u32,
}

/// Pulse train for `decision` starting at `at`.
///
/// Pulses repeat every `1 / pwm_freq_hz`, each lasting `duty / pwm_freq_hz`,
/// for `floor(duration_s * pwm_freq_hz)` whole periods (a trailing partial
/// period is dropped). A duty of 1 gives one continuous pulse of
/// `duration_s`.
pub fn trigger_schedule(decision: u32, at: Time, cfg: &StimChannelConfig) -> Vec<PulseEvent> {
    if !cfg.trigger_classes.contains(&decision) {
        return Vec::new();
    }
    let duration = to_time(cfg.duration_s);
    if cfg.duty >= 1.0 {
        return vec![PulseEvent {
            t_on: at,
            t_off: at + duration,
            channel: cfg.channel,
        }];
    }
    let freq = to_time(cfg.pwm_freq_hz);
    let period = freq.recip();
    let width = to_time(cfg.duty) * period;
    let count = (duration * freq).floor().to_integer();
    (0..count)
        .map(|k| {
            let t_on = at + period * k;
            PulseEvent {
                t_on,
                t_off: t_on + width,
                channel: cfg.channel,
            }
        })
        .collect()
}

/// Deterministic test signal: band-limited noise plus a per-stage tone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSource {
    pub seed: u64,
    /// Raw (pre-decimation) sample rate.
    pub sample_rate_hz: f64,
    pub noise_amplitude: f64,
    /// Per stage: (tone frequency in Hz, tone amplitude).
    pub stage_signatures: Vec<(f64, f64)>,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self {
            seed: 0,
            sample_rate_hz: 800.0,
            noise_amplitude: 300.0,
            stage_signatures: vec![
                (20.0, 400.0),
                (7.0, 900.0),
                (13.0, 1500.0),
                (2.0, 3000.0),
                (5.0, 700.0),
            ],
        }
    }
}

impl SyntheticSource {
    /// Generates `seconds_per_epoch` of signal for every entry of `stages`.
    pub fn generate(&self, stages: &[u32], seconds_per_epoch: f64, input_bits: u32) -> Vec<i64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let per_epoch = (seconds_per_epoch * self.sample_rate_hz).round() as usize;
        let limit = (1i64 << (input_bits - 1)) - 1;
        let mut lowpass = 0.0f64;
        let mut out = Vec::with_capacity(per_epoch * stages.len());
        let mut t = 0usize;
        for &stage in stages {
            let (freq, amp) = self
                .stage_signatures
                .get(stage as usize)
                .copied()
                .unwrap_or((0.0, 0.0));
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            for _ in 0..per_epoch {
                let white: f64 = rng.random_range(-1.0..1.0);
                lowpass = 0.8 * lowpass + 0.2 * white;
                let time = t as f64 / self.sample_rate_hz;
                let tone = amp * (std::f64::consts::TAU * freq * time + phase).sin();
                let v = (tone + self.noise_amplitude * 3.0 * lowpass).round() as i64;
                out.push(v.clamp(-limit - 1, limit));
                t += 1;
            }
        }
        out
    }
}

/// Raw sample stream: `MUXS`, u16 version, u32 rate (Hz), u8 bits,
/// u8 channels, then interleaved little-endian i32 samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignalStream {
    pub sample_rate_hz: u32,
    pub bits: u8,
    pub channels: u8,
    /// Interleaved samples.
    pub samples: Vec<i32>,
}

pub const SIGNAL_MAGIC: &[u8; 4] = b"MUXS";

impl SignalStream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(12 + 4 * self.samples.len());
        b.extend_from_slice(SIGNAL_MAGIC);
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&self.sample_rate_hz.to_le_bytes());
        b.push(self.bits);
        b.push(self.channels);
        for s in &self.samples {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, FrontendError> {
        let bad = |m: &str| Err(FrontendError::BadSignal(m.into()));
        if b.len() < 12 || &b[..4] != SIGNAL_MAGIC {
            return bad("missing MUXS header");
        }
        if u16::from_le_bytes([b[4], b[5]]) != 1 {
            return bad("unsupported version");
        }
        let rate = u32::from_le_bytes(b[6..10].try_into().expect("4 bytes"));
        let (bits, channels) = (b[10], b[11]);
        if channels == 0 || !(1..=32).contains(&bits) || rate == 0 {
            return bad("invalid rate, bit depth or channel count");
        }
        let body = &b[12..];
        if !body.len().is_multiple_of(4 * channels as usize) {
            return bad("sample payload is not whole frames");
        }
        let samples = body
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            sample_rate_hz: rate,
            bits,
            channels,
            samples,
        })
    }

    /// Samples of one channel.
    pub fn channel(&self, c: usize) -> Vec<i64> {
        self.samples
            .iter()
            .skip(c)
            .step_by(self.channels as usize)
            .map(|&s| s as i64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub cic: CicConfig,
    /// Raw input rate; must equal the segment rate times the decimation.
    pub input_rate_hz: f64,
    pub segment: SegmentConfig,
    /// Per-class early-stop thresholds; empty means the safe defaults.
    pub thresholds: Vec<u32>,
    pub channels: Vec<StimChannelConfig>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            cic: CicConfig::default(),
            input_rate_hz: 800.0,
            segment: SegmentConfig::default(),
            thresholds: Vec::new(),
            channels: vec![
                StimChannelConfig {
                    channel: 0,
                    // N1, N2, N3 with W=0 and REM=4.
                    trigger_classes: BTreeSet::from([1, 2, 3]),
                    ..Default::default()
                },
                StimChannelConfig {
                    channel: 1,
                    ..Default::default()
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogEvent {
    Decision {
        epoch: u64,
        stage: u32,
        classifications_used: u32,
        votes: Vec<u32>,
    },
    PulseOn { channel: u32, pulse: u64 },
    PulseOff { channel: u32, pulse: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub t: Time,
    pub event: LogEvent,
}

#[derive(Serialize)]
struct JsonRecord<'a> {
    t: f64,
    t_exact: String,
    kind: &'a str,
    payload: serde_json::Value,
}

impl LogRecord {
    /// `{"t":..,"t_exact":"num/den","kind":..,"payload":{..}}`.
    pub fn to_json(&self) -> String {
        let (kind, payload) = match &self.event {
            LogEvent::Decision {
                epoch,
                stage,
                classifications_used,
                votes,
            } => (
                "decision",
                serde_json::json!({
                    "epoch": epoch,
                    "stage": stage,
                    "classifications_used": classifications_used,
                    "votes": votes,
                }),
            ),
            LogEvent::PulseOn { channel, pulse } => {
                ("pulse_on", serde_json::json!({"channel": channel, "pulse": pulse}))
            }
            LogEvent::PulseOff { channel, pulse } => {
                ("pulse_off", serde_json::json!({"channel": channel, "pulse": pulse}))
            }
        };
        let rec = JsonRecord {
            t: *self.t.numer() as f64 / *self.t.denom() as f64,
            t_exact: format!("{}/{}", self.t.numer(), self.t.denom()),
            kind,
            payload,
        };
        serde_json::to_string(&rec).expect("log records serialize")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    pub epochs: Vec<EpochResult>,
    pub pulses: Vec<PulseEvent>,
}

impl RunLog {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.records {
            writeln!(out, "{}", r.to_json())?;
        }
        Ok(())
    }
}

/// Checks rates and segment geometry against the classifier's expectations.
/// `segment_len` is the classifier's input length, when it has a fixed one.
pub fn check_loop_config(
    cfg: &LoopConfig,
    classes: u32,
    segment_len: Option<usize>,
) -> Result<usize, FrontendError> {
    cfg.cic.validate()?;
    let err = |m: String| Err(FrontendError::LoopConfigError(m));
    let per_segment = cfg
        .segment
        .samples_per_segment()
        .map_err(|e| FrontendError::LoopConfigError(e.to_string()))?;
    if let Some(len) = segment_len.filter(|&l| l != per_segment) {
        return err(format!(
            "segment holds {per_segment} decimated samples but the model takes {len}"
        ));
    }
    let expected_rate = cfg.segment.sample_rate_hz * cfg.cic.decimation as f64;
    if (expected_rate - cfg.input_rate_hz).abs() > 1e-9 * expected_rate {
        return err(format!(
            "input rate {} Hz decimated by {} does not give {} Hz",
            cfg.input_rate_hz, cfg.cic.decimation, cfg.segment.sample_rate_hz
        ));
    }
    if !cfg.thresholds.is_empty() && cfg.thresholds.len() != classes as usize {
        return err(format!(
            "{} thresholds for {classes} classes",
            cfg.thresholds.len()
        ));
    }
    let mut seen = BTreeSet::new();
    for ch in &cfg.channels {
        ch.validate()?;
        if !seen.insert(ch.channel) {
            return err(format!("channel {} configured twice", ch.channel));
        }
    }
    if to_time(cfg.input_rate_hz) == Ratio::from_integer(0) {
        return err("input rate is zero".into());
    }
    Ok(per_segment)
}

/// source -> CIC -> segments -> early-stop vote -> PWM schedules.
///
/// A decision is stamped at the end of the last raw sample of the last
/// segment it consumed. A channel whose schedule is still running ignores
/// new triggers. Trailing samples that do not fill an epoch are dropped.
pub fn run_closed_loop<C: SegmentClassifier + ?Sized>(
    source: &[i64],
    classifier: &mut C,
    classes: u32,
    cfg: &LoopConfig,
) -> Result<RunLog, FrontendError> {
    let per_segment = check_loop_config(cfg, classes, None)?;
    let thresholds = if cfg.thresholds.is_empty() {
        crate::pipeline::safe_thresholds(cfg.segment.votes_per_epoch, classes)
    } else {
        cfg.thresholds.clone()
    };
    let decimated = cic_decimate(source, cfg.cic)?;
    let votes = cfg.segment.votes_per_epoch as usize;
    let per_epoch = per_segment * votes;
    let raw_rate = to_time(cfg.input_rate_hz);
    let decim = cfg.cic.decimation as i64;

    let mut log = RunLog::default();
    // Each pending record carries an insertion sequence for stable ordering.
    let mut pending: Vec<(Time, u64, LogEvent)> = Vec::new();
    let mut seq = 0u64;
    let mut active_until: Vec<Time> = vec![Ratio::from_integer(i64::MIN / 4); cfg.channels.len()];
    let mut pulse_ids = vec![0u64; cfg.channels.len()];

    for (epoch, block) in decimated.chunks_exact(per_epoch).enumerate() {
        let result = epoch_stage(block.chunks_exact(per_segment), classifier, &thresholds, votes as u32)?;
        let consumed = (epoch * votes + result.classifications_used as usize) * per_segment;
        let at = Ratio::from_integer(consumed as i64 * decim) / raw_rate;
        pending.push((
            at,
            seq,
            LogEvent::Decision {
                epoch: epoch as u64,
                stage: result.stage,
                classifications_used: result.classifications_used,
                votes: result.votes.clone(),
            },
        ));
        seq += 1;
        for (ci, ch) in cfg.channels.iter().enumerate() {
            if at < active_until[ci] {
                continue;
            }
            let pulses = trigger_schedule(result.stage, at, ch);
            if pulses.is_empty() {
                continue;
            }
            active_until[ci] = at + to_time(ch.duration_s);
            for p in pulses {
                let id = pulse_ids[ci];
                pulse_ids[ci] += 1;
                pending.push((p.t_on, seq, LogEvent::PulseOn { channel: p.channel, pulse: id }));
                pending.push((p.t_off, seq + 1, LogEvent::PulseOff { channel: p.channel, pulse: id }));
                seq += 2;
                log.pulses.push(p);
            }
        }
        log.epochs.push(result);
    }
    pending.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    log.records = pending
        .into_iter()
        .map(|(t, _, event)| LogRecord { t, event })
        .collect();
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct FIR oracle: `order` cascaded moving sums of length `R*M`,
    /// then keep every `R`-th output starting at index `R - 1`.
    fn cic_reference(x: &[i64], cfg: CicConfig) -> Vec<i64> {
        let len = (cfg.decimation * cfg.differential_delay) as usize;
        let mut y = x.to_vec();
        for _ in 0..cfg.order {
            y = (0..y.len())
                .map(|i| y[i.saturating_sub(len - 1)..=i].iter().sum())
                .collect();
        }
        y.into_iter()
            .skip(cfg.decimation as usize - 1)
            .step_by(cfg.decimation as usize)
            .collect()
    }

    fn cfg(order: u32, decimation: u32, differential_delay: u32) -> CicConfig {
        CicConfig {
            order,
            decimation,
            differential_delay,
            input_bits: 12,
        }
    }

    #[test]
    fn dc_gain() {
        let out = cic_decimate(&[1; 64], cfg(1, 4, 1)).unwrap();
        assert_eq!(*out.last().unwrap(), 4);
        let c = cfg(3, 8, 2);
        let out = cic_decimate(&[5; 400], c).unwrap();
        assert_eq!(*out.last().unwrap(), 5 * c.dc_gain());
        assert_eq!(c.dc_gain(), 4096);
    }

    #[test]
    fn impulse_response() {
        let mut x = vec![0i64; 12];
        x[0] = 1;
        let c = cfg(2, 2, 1);
        // Two length-2 moving sums give [1, 2, 1]; decimating from index 1.
        assert_eq!(cic_decimate(&x, c).unwrap(), vec![2, 0, 0, 0, 0, 0]);
        assert_eq!(cic_decimate(&x, c).unwrap(), cic_reference(&x, c));
        x.rotate_right(1);
        assert_eq!(cic_decimate(&x, c).unwrap(), vec![1, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn zero_in_zero_out() {
        assert!(cic_decimate(&[0; 100], CicConfig::default()).unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn matches_reference_with_wrapping_registers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<i64> = (0..2000).map(|_| rng.random_range(-2048..2048)).collect();
        for c in [cfg(3, 8, 2), cfg(2, 4, 1), cfg(1, 2, 2)] {
            assert_eq!(cic_decimate(&x, c).unwrap(), cic_reference(&x, c));
        }
    }

    #[test]
    fn streaming_equals_one_shot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<i64> = (0..999).map(|_| rng.random_range(-2048..2048)).collect();
        let c = cfg(3, 4, 2);
        let mut d = CicDecimator::new(c).unwrap();
        let mut parts = Vec::new();
        for chunk in x.chunks(37) {
            parts.extend(d.process(chunk));
        }
        assert_eq!(parts, cic_decimate(&x, c).unwrap());
    }

    #[test]
    fn rejects_bad_cic() {
        assert!(CicDecimator::new(cfg(0, 4, 1)).is_err());
        assert!(CicDecimator::new(cfg(1, 1, 1)).is_err());
        let wide = CicConfig {
            input_bits: 40,
            ..cfg(6, 64, 2)
        };
        assert!(CicDecimator::new(wide).is_err());
    }

    fn stim(classes: &[u32], freq: f64, duty: f64, duration: f64) -> StimChannelConfig {
        StimChannelConfig {
            channel: 0,
            trigger_classes: classes.iter().copied().collect(),
            pwm_freq_hz: freq,
            duty,
            duration_s: duration,
        }
    }

    #[test]
    fn schedule_examples() {
        let zero = Ratio::from_integer(0);
        assert!(trigger_schedule(0, zero, &stim(&[2], 10.0, 0.1, 1.0)).is_empty());

        let pulses = trigger_schedule(2, zero, &stim(&[2], 10.0, 0.1, 1.0));
        assert_eq!(pulses.len(), 10);
        for (k, p) in pulses.iter().enumerate() {
            assert_eq!(p.t_on, Ratio::new(k as i64, 10));
            assert_eq!(p.t_off - p.t_on, Ratio::new(1, 100));
        }

        let one = trigger_schedule(2, zero, &stim(&[2], 10.0, 1.0, 2.5));
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].t_off, Ratio::new(5, 2));
    }

    #[test]
    fn partial_period_truncated() {
        let pulses = trigger_schedule(1, Ratio::new(3, 2), &stim(&[1], 10.0, 0.1, 0.35));
        assert_eq!(pulses.len(), 3);
        assert_eq!(pulses[2].t_on, Ratio::new(17, 10));
        assert!(pulses.windows(2).all(|w| w[0].t_off < w[1].t_on));
    }

    #[test]
    fn signal_stream_round_trip() {
        let s = SignalStream {
            sample_rate_hz: 800,
            bits: 16,
            channels: 2,
            samples: vec![1, -2, 3, -4, 5, -6],
        };
        let back = SignalStream::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.channel(1), vec![-2, -4, -6]);
        assert!(SignalStream::from_bytes(b"nope").is_err());
    }

    #[test]
    fn synthetic_is_seeded() {
        let src = SyntheticSource::default();
        let a = src.generate(&[0, 2, 4], 1.0, 16);
        assert_eq!(a, src.generate(&[0, 2, 4], 1.0, 16));
        assert_eq!(a.len(), 2400);
        let other = SyntheticSource { seed: 1, ..src };
        assert_ne!(a, other.generate(&[0, 2, 4], 1.0, 16));
    }

    fn loop_cfg() -> LoopConfig {
        LoopConfig {
            segment: SegmentConfig {
                segment_seconds: 1.0,
                votes_per_epoch: 6,
                sample_rate_hz: 100.0,
            },
            ..LoopConfig::default()
        }
    }

    #[test]
    fn loop_triggers_once_per_idle_epoch() {
        let cfg = loop_cfg();
        let source = vec![0i64; 800 * 6 * 3];
        let mut always_n2 = |_: &[i64]| Ok(2u32);
        let log = run_closed_loop(&source, &mut always_n2, 5, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 3);
        assert!(log.epochs.iter().all(|e| e.classifications_used == 4));
        // Each 1 s schedule ends long before the next epoch decides.
        assert_eq!(log.pulses.len(), 30);
        assert!(log.records.windows(2).all(|w| w[0].t <= w[1].t));
        let first = &log.records[0];
        assert_eq!(first.t, Ratio::from_integer(4));
        assert!(matches!(first.event, LogEvent::Decision { stage: 2, .. }));
    }

    #[test]
    fn loop_retrigger_suppressed() {
        let mut cfg = loop_cfg();
        cfg.channels[0].duration_s = 20.0;
        let source = vec![0i64; 800 * 6 * 3];
        let mut always_n2 = |_: &[i64]| Ok(2u32);
        let log = run_closed_loop(&source, &mut always_n2, 5, &cfg).unwrap();
        // Decisions at 4 s, 10 s, 16 s; the first schedule runs until 24 s.
        assert_eq!(log.pulses.len(), 200);
    }

    #[test]
    fn loop_without_triggers() {
        let mut cfg = loop_cfg();
        cfg.channels.iter_mut().for_each(|c| c.trigger_classes.clear());
        let source = vec![0i64; 800 * 6 * 2];
        let mut always_n2 = |_: &[i64]| Ok(2u32);
        let log = run_closed_loop(&source, &mut always_n2, 5, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 2);
        assert!(log.pulses.is_empty());
        assert_eq!(log.records.len(), 2);
    }

    #[test]
    fn loop_config_errors() {
        let mut cfg = loop_cfg();
        cfg.input_rate_hz = 1000.0;
        let mut c = |_: &[i64]| Ok(0u32);
        assert!(matches!(
            run_closed_loop(&[0; 10], &mut c, 5, &cfg),
            Err(FrontendError::LoopConfigError(_))
        ));
        let mut cfg = loop_cfg();
        cfg.thresholds = vec![4; 3];
        assert!(matches!(
            run_closed_loop(&[0; 10], &mut c, 5, &cfg),
            Err(FrontendError::LoopConfigError(_))
        ));
    }

    #[test]
    fn json_record_fields() {
        let r = LogRecord {
            t: Ratio::new(1, 10),
            event: LogEvent::PulseOn { channel: 0, pulse: 3 },
        };
        assert_eq!(
            r.to_json(),
            r#"{"t":0.1,"t_exact":"1/10","kind":"pulse_on","payload":{"channel":0,"pulse":3}}"#
        );
    }
}
