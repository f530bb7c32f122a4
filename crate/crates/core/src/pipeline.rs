//! Segment classification and class-wise early-stop voting.
//!
//! An epoch is scored from `votes_per_epoch` consecutive segments. Segments
//! are classified lazily: once some class reaches its threshold the epoch is
//! decided and the remaining segments are never run.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::CompiledModel;
use crate::inference::{argmax, InferenceError, ModelEngine};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("segment has {got} samples, expected {expected}")]
    SegmentLengthError { expected: usize, got: usize },
    #[error("vote pushed after the epoch was decided")]
    VoteAfterDecision,
    #[error("class {class} outside 0..{classes}")]
    BadClass { class: u32, classes: u32 },
    #[error("segment stream ended after {seen} segments without a decision")]
    IncompleteEpoch { seen: u32 },
    #[error("invalid segment configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    pub segment_seconds: f64,
    pub votes_per_epoch: u32,
    /// Rate of the decimated stream fed to the classifier.
    pub sample_rate_hz: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            segment_seconds: 5.0,
            votes_per_epoch: 6,
            sample_rate_hz: 100.0,
        }
    }
}

impl SegmentConfig {
    /// Samples per segment; `segment_seconds * sample_rate_hz` must be whole.
    pub fn samples_per_segment(&self) -> Result<usize, PipelineError> {
        if !(self.segment_seconds > 0.0 && self.sample_rate_hz > 0.0) {
            return Err(PipelineError::Config(
                "segment length and sample rate must be positive".into(),
            ));
        }
        if self.votes_per_epoch == 0 {
            return Err(PipelineError::Config("votes_per_epoch must be at least 1".into()));
        }
        let exact = self.segment_seconds * self.sample_rate_hz;
        let rounded = exact.round();
        if (exact - rounded).abs() > 1e-9 * exact.max(1.0) || rounded < 1.0 {
            return Err(PipelineError::Config(format!(
                "{} s at {} Hz is not a whole number of samples",
                self.segment_seconds, self.sample_rate_hz
            )));
        }
        Ok(rounded as usize)
    }
}

/// `floor(votes / 2) + 1` for every class: an early winner can never lose
/// the full-epoch plurality.
pub fn safe_thresholds(votes_per_epoch: u32, classes: u32) -> Vec<u32> {
    vec![votes_per_epoch / 2 + 1; classes as usize]
}

/// Running tally for one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteState {
    counts: Vec<u32>,
    thresholds: Vec<u32>,
    votes_per_epoch: u32,
    seen: u32,
    decided: Option<u32>,
}

impl VoteState {
    pub fn new(thresholds: Vec<u32>, votes_per_epoch: u32) -> Result<Self, PipelineError> {
        if thresholds.is_empty() || thresholds.len() > crate::model::MAX_CLASSES as usize {
            return Err(PipelineError::Config(format!(
                "{} classes outside 1..=10",
                thresholds.len()
            )));
        }
        if votes_per_epoch == 0 {
            return Err(PipelineError::Config("votes_per_epoch must be at least 1".into()));
        }
        Ok(Self {
            counts: vec![0; thresholds.len()],
            thresholds,
            votes_per_epoch,
            seen: 0,
            decided: None,
        })
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn seen(&self) -> u32 {
        self.seen
    }

    pub fn decided(&self) -> Option<u32> {
        self.decided
    }

    /// Adds one segment prediction and returns the decision, if any.
    pub fn push(&mut self, class: u32) -> Result<Option<u32>, PipelineError> {
        if self.decided.is_some() {
            return Err(PipelineError::VoteAfterDecision);
        }
        let classes = self.counts.len() as u32;
        if class >= classes {
            return Err(PipelineError::BadClass { class, classes });
        }
        self.counts[class as usize] += 1;
        self.seen += 1;
        if self.counts[class as usize] >= self.thresholds[class as usize] {
            self.decided = Some(class);
        } else if self.seen == self.votes_per_epoch {
            self.decided = Some(plurality(&self.counts));
        }
        Ok(self.decided)
    }
}

/// Most-voted class; ties go to the lowest id.
pub fn plurality(counts: &[u32]) -> u32 {
    counts
        .iter()
        .enumerate()
        .fold((0usize, 0u32), |best, (i, &c)| if c > best.1 { (i, c) } else { best })
        .0 as u32
}

/// Anything that turns a segment of decimated samples into a class id.
pub trait SegmentClassifier {
    fn classify(&mut self, samples: &[i64]) -> Result<u32, PipelineError>;
}

impl<F> SegmentClassifier for F
where
    F: FnMut(&[i64]) -> Result<u32, PipelineError>,
{
    fn classify(&mut self, samples: &[i64]) -> Result<u32, PipelineError> {
        self(samples)
    }
}

/// Maps decimated filter output onto first-layer activation codes:
/// `clamp(round(sample / 2^shift) + zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct InputQuantizer {
    pub shift: u32,
}


impl InputQuantizer {
    pub fn apply(&self, sample: i64, zero_point: i64, range: (i64, i64)) -> i64 {
        let scaled = if self.shift == 0 {
            sample
        } else {
            (sample + (1i64 << (self.shift - 1))) >> self.shift
        };
        (scaled + zero_point).clamp(range.0, range.1)
    }
}

/// A compiled model on its engine, classifying one segment at a time.
#[derive(Debug, Clone)]
pub struct ModelClassifier<'a> {
    model: &'a CompiledModel,
    engine: ModelEngine,
    input: InputQuantizer,
    classifications: u64,
}

impl<'a> ModelClassifier<'a> {
    pub fn new(model: &'a CompiledModel, input: InputQuantizer) -> Result<Self, PipelineError> {
        Ok(Self {
            model,
            engine: ModelEngine::new(model)?,
            input,
            classifications: 0,
        })
    }

    pub fn with_engine(model: &'a CompiledModel, engine: ModelEngine, input: InputQuantizer) -> Self {
        Self {
            model,
            engine,
            input,
            classifications: 0,
        }
    }

    pub fn engine(&self) -> &ModelEngine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut ModelEngine {
        &mut self.engine
    }

    pub fn classifications(&self) -> u64 {
        self.classifications
    }

    /// Samples expected per segment (all input channels, channel-major).
    pub fn segment_len(&self) -> usize {
        (self.model.header.input_channels * self.model.header.input_len) as usize
    }

    /// Integer logits for one segment of decimated samples.
    pub fn logits(&mut self, samples: &[i64]) -> Result<Vec<i64>, PipelineError> {
        let expected = self.segment_len();
        if samples.len() != expected {
            return Err(PipelineError::SegmentLengthError {
                expected,
                got: samples.len(),
            });
        }
        let h = &self.model.header;
        let range = self.model.layers[0].input_sign.range(h.activation_bits);
        let codes: Vec<i64> = samples
            .iter()
            .map(|&s| self.input.apply(s, h.input_zero_point, range))
            .collect();
        self.classifications += 1;
        Ok(self.engine.forward(self.model, &codes)?)
    }
}

impl SegmentClassifier for ModelClassifier<'_> {
    fn classify(&mut self, samples: &[i64]) -> Result<u32, PipelineError> {
        Ok(argmax(&self.logits(samples)?) as u32)
    }
}

/// Argmax class of one segment.
pub fn classify_segment(classifier: &mut ModelClassifier<'_>, samples: &[i64]) -> Result<u32, PipelineError> {
    classifier.classify(samples)
}

/// Decision for one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochResult {
    pub stage: u32,
    pub classifications_used: u32,
    pub votes: Vec<u32>,
}

/// Classifies segments from `segments` until the vote decides.
///
/// Segments past the decision are never pulled from the iterator.
pub fn epoch_stage<I, S, C>(
    segments: I,
    classifier: &mut C,
    thresholds: &[u32],
    votes_per_epoch: u32,
) -> Result<EpochResult, PipelineError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[i64]>,
    C: SegmentClassifier + ?Sized,
{
    let mut state = VoteState::new(thresholds.to_vec(), votes_per_epoch)?;
    let mut votes = Vec::with_capacity(votes_per_epoch as usize);
    for segment in segments {
        let class = classifier.classify(segment.as_ref())?;
        votes.push(class);
        if let Some(stage) = state.push(class)? {
            return Ok(EpochResult {
                stage,
                classifications_used: state.seen(),
                votes,
            });
        }
    }
    Err(PipelineError::IncompleteEpoch { seen: state.seen() })
}

/// Writes `epoch,stage,classifications_used,vote_0..vote_{V-1}` rows.
pub fn write_report<W: Write>(mut out: W, results: &[EpochResult], votes_per_epoch: u32) -> io::Result<()> {
    write!(out, "epoch,stage,classifications_used")?;
    for v in 0..votes_per_epoch {
        write!(out, ",vote_{v}")?;
    }
    writeln!(out)?;
    for (e, r) in results.iter().enumerate() {
        write!(out, "{e},{},{}", r.stage, r.classifications_used)?;
        for v in 0..votes_per_epoch as usize {
            match r.votes.get(v) {
                Some(c) => write!(out, ",{c}")?,
                None => write!(out, ",")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Accuracy and early-stop savings over labeled epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub epochs: usize,
    pub correct: usize,
    pub classifications_used: u64,
    pub classifications_available: u64,
    /// `confusion[label][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalSummary {
    pub fn accuracy(&self) -> f64 {
        if self.epochs == 0 {
            0.0
        } else {
            self.correct as f64 / self.epochs as f64
        }
    }

    /// Fraction of segment classifications skipped by early stopping.
    pub fn saved_fraction(&self) -> f64 {
        if self.classifications_available == 0 {
            0.0
        } else {
            1.0 - self.classifications_used as f64 / self.classifications_available as f64
        }
    }
}

/// Scores `results` against `labels`.
pub fn summarize(results: &[EpochResult], labels: &[u32], classes: u32, votes_per_epoch: u32) -> EvalSummary {
    let mut confusion = vec![vec![0u64; classes as usize]; classes as usize];
    let mut correct = 0;
    for (r, &label) in results.iter().zip(labels) {
        if (label as usize) < confusion.len() && (r.stage as usize) < confusion.len() {
            confusion[label as usize][r.stage as usize] += 1;
        }
        correct += (r.stage == label) as usize;
    }
    EvalSummary {
        epochs: results.len().min(labels.len()),
        correct,
        classifications_used: results.iter().map(|r| r.classifications_used as u64).sum(),
        classifications_available: results.len() as u64 * votes_per_epoch as u64,
        confusion,
    }
}
