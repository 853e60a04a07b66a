//! Downstream datasets: sleep-stage segments, R-peak delimited heartbeats,
//! class balancing with stratified splits, and synthetic ECG.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::quantizer::{encode_samples, QuantizerCodebook};
use crate::rng::substream;
use crate::signal::{EcgRecord, TARGET_RATE_HZ};
use crate::tokenizer::{BpeTokenizer, TokenizedSequence};
use crate::training::LabeledSequence;

pub const SLEEP_EPOCH_LEN: usize = 10_800;
pub const SLEEP_SEGMENT_LEN: usize = 1_080;
pub const SEGMENTS_PER_EPOCH: usize = SLEEP_EPOCH_LEN / SLEEP_SEGMENT_LEN;
pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Sleep3,
    Sleep5,
    Heartbeat4,
}

impl Task {
    pub fn n_classes(self) -> usize {
        self.class_names().len()
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Task::Sleep3 => &["Wake", "NREM", "REM"],
            Task::Sleep5 => &["Wake", "S1", "S2", "S3", "REM"],
            Task::Heartbeat4 => &["N", "S", "V", "Q"],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Sleep3 => "sleep3",
            Task::Sleep5 => "sleep5",
            Task::Heartbeat4 => "heartbeat4",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sleep3" => Ok(Task::Sleep3),
            "sleep5" => Ok(Task::Sleep5),
            "heartbeat4" => Ok(Task::Heartbeat4),
            other => Err(Error::Parameter(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SleepStage {
    Wake,
    Rem,
    S1,
    S2,
    S3,
    S4,
}

impl SleepStage {
    pub const ALL: [SleepStage; 6] = [
        SleepStage::Wake,
        SleepStage::Rem,
        SleepStage::S1,
        SleepStage::S2,
        SleepStage::S3,
        SleepStage::S4,
    ];

    /// Class index under a sleep task. S4 folds into S3; the three-class
    /// task folds S1 to S3 into NREM.
    pub fn label(self, task: Task) -> Result<usize> {
        use SleepStage::*;
        match task {
            Task::Sleep3 => Ok(match self {
                Wake => 0,
                S1 | S2 | S3 | S4 => 1,
                Rem => 2,
            }),
            Task::Sleep5 => Ok(match self {
                Wake => 0,
                S1 => 1,
                S2 => 2,
                S3 | S4 => 3,
                Rem => 4,
            }),
            Task::Heartbeat4 => Err(Error::Parameter("sleep stages need a sleep task".into())),
        }
    }
}

impl FromStr for SleepStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "W" | "WAKE" => Ok(SleepStage::Wake),
            "R" | "REM" => Ok(SleepStage::Rem),
            "1" | "S1" | "N1" => Ok(SleepStage::S1),
            "2" | "S2" | "N2" => Ok(SleepStage::S2),
            "3" | "S3" | "N3" => Ok(SleepStage::S3),
            "4" | "S4" => Ok(SleepStage::S4),
            other => Err(Error::Format(format!("unknown sleep stage {other:?}"))),
        }
    }
}

impl fmt::Display for SleepStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SleepStage::Wake => "W",
            SleepStage::Rem => "R",
            SleepStage::S1 => "S1",
            SleepStage::S2 => "S2",
            SleepStage::S3 => "S3",
            SleepStage::S4 => "S4",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SleepEpoch {
    pub samples: Vec<f64>,
    pub stage: SleepStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BeatClass {
    N,
    S,
    V,
    Q,
}

impl BeatClass {
    pub const ALL: [BeatClass; 4] = [BeatClass::N, BeatClass::S, BeatClass::V, BeatClass::Q];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for BeatClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" => Ok(BeatClass::N),
            "S" => Ok(BeatClass::S),
            "V" => Ok(BeatClass::V),
            "Q" => Ok(BeatClass::Q),
            other => Err(Error::Format(format!("unknown beat class {other:?}"))),
        }
    }
}

impl fmt::Display for BeatClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// R-peak positions with one class per peak.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeatAnnotation {
    r_peaks: Vec<usize>,
    labels: Vec<BeatClass>,
}

impl BeatAnnotation {
    pub fn new(r_peaks: Vec<usize>, labels: Vec<BeatClass>) -> Result<Self> {
        if r_peaks.len() != labels.len() {
            return Err(Error::Format(format!(
                "{} peaks but {} beat labels",
                r_peaks.len(),
                labels.len()
            )));
        }
        if let Some(w) = r_peaks.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Format(format!(
                "R-peaks must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { r_peaks, labels })
    }

    pub fn r_peaks(&self) -> &[usize] {
        &self.r_peaks
    }

    pub fn labels(&self) -> &[BeatClass] {
        &self.labels
    }

    /// Lines of `<sample>\t<class>`.
    pub fn to_text(&self) -> String {
        self.r_peaks
            .iter()
            .zip(&self.labels)
            .map(|(p, l)| format!("{p}\t{l}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut peaks = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let (Some(p), Some(l), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Format(format!("annotation line {}: {line:?}", n + 1)));
            };
            peaks.push(
                p.parse()
                    .map_err(|_| Error::Format(format!("annotation line {}: bad index {p:?}", n + 1)))?,
            );
            labels.push(l.parse()?);
        }
        Self::new(peaks, labels)
    }
}

/// A labelled slice of a signal.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSegment {
    pub samples: Vec<f64>,
    pub label: usize,
    pub task: Task,
    /// First sample of the segment in its source signal.
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SleepSegments {
    pub segments: Vec<LabeledSegment>,
    /// Epochs skipped because they were not exactly 30 s at 360 Hz.
    pub rejected: usize,
}

/// Cuts each 30 s epoch into ten 3 s segments that inherit its label.
pub fn prepare_sleep(epochs: &[SleepEpoch], task: Task) -> Result<SleepSegments> {
    let mut segments = Vec::with_capacity(epochs.len() * SEGMENTS_PER_EPOCH);
    let mut rejected = 0;
    for (e, epoch) in epochs.iter().enumerate() {
        if epoch.samples.len() != SLEEP_EPOCH_LEN {
            rejected += 1;
            continue;
        }
        let label = epoch.stage.label(task)?;
        for (k, chunk) in epoch.samples.chunks(SLEEP_SEGMENT_LEN).enumerate() {
            segments.push(LabeledSegment {
                samples: chunk.to_vec(),
                label,
                task,
                start: e * SLEEP_EPOCH_LEN + k * SLEEP_SEGMENT_LEN,
            });
        }
    }
    if rejected > 0 {
        log::warn!("rejected {rejected} sleep epochs of the wrong length");
    }
    Ok(SleepSegments { segments, rejected })
}

/// Beat `i` spans from the midpoint with its predecessor to the midpoint
/// with its successor; the first and last peaks yield no beat.
pub fn beat_bounds(r_peaks: &[usize]) -> Result<Vec<(usize, usize)>> {
    if r_peaks.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 R-peaks, got {}",
            r_peaks.len()
        )));
    }
    if r_peaks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Format("R-peaks must be strictly increasing".into()));
    }
    let mid: Vec<usize> = r_peaks.windows(2).map(|w| (w[0] + w[1]) / 2).collect();
    Ok(mid.windows(2).map(|m| (m[0], m[1])).collect())
}

pub fn prepare_heartbeat(record: &EcgRecord, ann: &BeatAnnotation) -> Result<Vec<LabeledSegment>> {
    if let Some(&last) = ann.r_peaks.last() {
        if last >= record.len() {
            return Err(Error::Domain(format!(
                "R-peak {last} beyond record of {} samples",
                record.len()
            )));
        }
    }
    let bounds = beat_bounds(&ann.r_peaks)?;
    Ok(bounds
        .into_iter()
        .enumerate()
        .map(|(i, (start, end))| LabeledSegment {
            samples: record.samples()[start..end].to_vec(),
            label: ann.labels[i + 1].index(),
            task: Task::Heartbeat4,
            start,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Splits<T> {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Undersamples every class to `per_class` (default: the smallest class)
/// and splits each class by `ratios`. Deterministic under `seed`.
pub fn balance_and_split<T: Clone>(
    items: &[T],
    label_of: impl Fn(&T) -> usize,
    n_classes: usize,
    per_class: Option<usize>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Splits<T>> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, item) in items.iter().enumerate() {
        let k = label_of(item);
        if k >= n_classes {
            return Err(Error::Domain(format!("label {k} outside {n_classes} classes")));
        }
        by_class[k].push(i);
    }
    if let Some(k) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Degenerate(format!("class {k} has no examples")));
    }
    let smallest = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let take = per_class.unwrap_or(smallest);
    if take > smallest {
        return Err(Error::Parameter(format!(
            "per_class {take} exceeds the smallest class count {smallest}"
        )));
    }
    let n_train = (take as f64 * a).round() as usize;
    let n_val = ((take as f64 * b).round() as usize).min(take - n_train);
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (k, indices) in by_class.iter_mut().enumerate() {
        indices.shuffle(&mut substream(seed, &format!("balance/class/{k}")));
        indices.truncate(take);
        let (train, rest) = indices.split_at(n_train);
        let (val, test) = rest.split_at(n_val);
        splits.train.extend(train.iter().map(|&i| items[i].clone()));
        splits.val.extend(val.iter().map(|&i| items[i].clone()));
        splits.test.extend(test.iter().map(|&i| items[i].clone()));
    }
    splits.train.shuffle(&mut substream(seed, "split/train"));
    splits.val.shuffle(&mut substream(seed, "split/val"));
    splits.test.shuffle(&mut substream(seed, "split/test"));
    Ok(splits)
}

/// Synthetic ECG settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthProfile {
    pub n_records: usize,
    pub rate_hz: f64,
    pub duration_secs: f64,
    /// Beats per second.
    pub base_freq_hz: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Fraction of an RR interval by which each beat may shift (below 0.5).
    pub rr_jitter: f64,
    /// Beat classes drawn from the first `n_classes` of N, S, V, Q.
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            n_records: 4,
            rate_hz: TARGET_RATE_HZ,
            duration_secs: 60.0,
            base_freq_hz: 1.0,
            noise: 0.01,
            rr_jitter: 0.05,
            n_classes: 4,
            seed: 0,
        }
    }
}

impl SynthProfile {
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("n_records".into(), self.n_records.to_string()),
            ("rate_hz".into(), format!("{:?}", self.rate_hz)),
            ("duration_secs".into(), format!("{:?}", self.duration_secs)),
            ("base_freq_hz".into(), format!("{:?}", self.base_freq_hz)),
            ("noise".into(), format!("{:?}", self.noise)),
            ("rr_jitter".into(), format!("{:?}", self.rr_jitter)),
            ("n_classes".into(), self.n_classes.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        let ok = self.n_records > 0
            && self.rate_hz > 0.0
            && self.duration_secs > 0.0
            && self.base_freq_hz > 0.0
            && self.noise >= 0.0
            && (0.0..0.5).contains(&self.rr_jitter)
            && (1..=4).contains(&self.n_classes);
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid synthetic profile {self:?}")))
        }
    }
}

/// One Gaussian bump: amplitude, centre offset from the R-peak (s), width (s).
type Wave = (f64, f64, f64);

/// P, Q, R, S, T waves of each beat class.
fn template(class: BeatClass) -> [Wave; 5] {
    match class {
        BeatClass::N => [
            (0.15, -0.20, 0.025),
            (-0.10, -0.03, 0.010),
            (1.00, 0.00, 0.012),
            (-0.20, 0.03, 0.010),
            (0.30, 0.25, 0.050),
        ],
        BeatClass::S => [
            (0.02, -0.12, 0.020),
            (-0.05, -0.03, 0.010),
            (0.75, 0.00, 0.010),
            (-0.10, 0.03, 0.010),
            (0.20, 0.20, 0.040),
        ],
        BeatClass::V => [
            (0.00, -0.20, 0.025),
            (-0.30, -0.05, 0.020),
            (1.40, 0.00, 0.035),
            (-0.50, 0.07, 0.030),
            (-0.35, 0.30, 0.060),
        ],
        BeatClass::Q => [
            (0.05, -0.20, 0.030),
            (-0.02, -0.03, 0.015),
            (0.45, 0.00, 0.020),
            (-0.02, 0.03, 0.015),
            (0.10, 0.25, 0.080),
        ],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub record: EcgRecord,
    pub annotation: BeatAnnotation,
}

/// Pseudo-ECG built from PQRST Gaussian-bump templates with known R-peaks.
/// Each beat's class is drawn uniformly and its amplitude jittered by 5%.
pub fn synth_corpus(profile: &SynthProfile) -> Result<Vec<SynthRecord>> {
    profile.validate()?;
    let n = (profile.duration_secs * profile.rate_hz).round() as usize;
    let noise = Normal::new(0.0, profile.noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Parameter(e.to_string()))?;
    let rr = 1.0 / profile.base_freq_hz;
    (0..profile.n_records)
        .map(|r| {
            let mut rng = substream(profile.seed, &format!("synth/record/{r}"));
            let mut samples = vec![0.0; n];
            let mut peaks = Vec::new();
            let mut labels = Vec::new();
            let mut k = 0usize;
            loop {
                let jitter = profile.rr_jitter * (2.0 * rng.random::<f64>() - 1.0);
                let t = (k as f64 + 0.5 + jitter) * rr;
                if t >= profile.duration_secs {
                    break;
                }
                let class = BeatClass::ALL[rng.random_range(0..profile.n_classes)];
                let scale = 1.0 + 0.05 * (2.0 * rng.random::<f64>() - 1.0);
                let peak = (t * profile.rate_hz).round() as usize;
                if peak < n && peaks.last().is_none_or(|&p| peak > p) {
                    peaks.push(peak);
                    labels.push(class);
                    for (amp, centre, width) in template(class) {
                        let c = t + centre;
                        let reach = 4.0 * width;
                        let lo = (((c - reach) * profile.rate_hz).floor().max(0.0)) as usize;
                        let hi = (((c + reach) * profile.rate_hz).ceil() as usize).min(n);
                        for (i, s) in samples.iter_mut().enumerate().take(hi).skip(lo) {
                            let dt = i as f64 / profile.rate_hz - c;
                            *s += scale * amp * (-0.5 * (dt / width).powi(2)).exp();
                        }
                    }
                }
                k += 1;
            }
            if profile.noise > 0.0 {
                for s in &mut samples {
                    *s += noise.sample(&mut rng);
                }
            }
            Ok(SynthRecord {
                record: EcgRecord::new(samples, profile.rate_hz, format!("synth{r:03}"), "ECG")?,
                annotation: BeatAnnotation::new(peaks, labels)?,
            })
        })
        .collect()
}

/// Heart rate used for each stage by [`synth_sleep_epochs`].
fn stage_rate_hz(stage: SleepStage) -> f64 {
    match stage {
        SleepStage::Wake => 1.35,
        SleepStage::Rem => 1.15,
        SleepStage::S1 => 1.05,
        SleepStage::S2 => 0.95,
        SleepStage::S3 => 0.85,
        SleepStage::S4 => 0.8,
    }
}

/// 30 s epochs at 360 Hz whose heart rate depends on the stage, which is
/// drawn uniformly. Samples are min-max normalized per epoch.
pub fn synth_sleep_epochs(n_epochs: usize, noise: f64, seed: u64) -> Result<Vec<SleepEpoch>> {
    (0..n_epochs)
        .map(|e| {
            let mut rng = substream(seed, &format!("synth/sleep/{e}"));
            let stage = SleepStage::ALL[rng.random_range(0..SleepStage::ALL.len())];
            let profile = SynthProfile {
                n_records: 1,
                rate_hz: TARGET_RATE_HZ,
                duration_secs: SLEEP_EPOCH_LEN as f64 / TARGET_RATE_HZ,
                base_freq_hz: stage_rate_hz(stage),
                noise,
                rr_jitter: 0.05,
                n_classes: 1,
                seed: rng.random(),
            };
            let rec = synth_corpus(&profile)?.remove(0).record;
            let normalized = crate::signal::normalize(&rec);
            Ok(SleepEpoch {
                samples: normalized.samples().to_vec(),
                stage,
            })
        })
        .collect()
}

/// Quantizes a normalized segment and tokenizes the symbol string.
pub fn encode_segment(
    samples: &[f64],
    codebook: &QuantizerCodebook,
    tokenizer: &BpeTokenizer,
) -> Result<TokenizedSequence> {
    tokenizer.encode(&encode_samples(samples, codebook)?, None)
}

const DATASET_MAGIC: &str = "HBD v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub task: Task,
    pub codebook_hash: String,
    pub tokenizer_hash: String,
    pub seed: u64,
    /// Additional provenance, written as `key=value` lines.
    pub extra: Vec<(String, String)>,
}

/// Tokenized, labelled examples with their provenance header.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub header: DatasetHeader,
    pub examples: Vec<LabeledSequence>,
}

impl TaskDataset {
    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Header lines, a `---` line, then `<label>\t<ids>` per example.
    /// Only attended ids are written.
    pub fn to_text(&self) -> String {
        let h = &self.header;
        let mut out = format!(
            "{DATASET_MAGIC}\ntask={}\ncodebook={}\ntokenizer={}\nseed={}\n",
            h.task, h.codebook_hash, h.tokenizer_hash, h.seed
        );
        for (k, v) in &h.extra {
            out.push_str(&format!("{k}={v}\n"));
        }
        out.push_str("---\n");
        for e in &self.examples {
            let ids: Vec<String> = e
                .tokens
                .ids
                .iter()
                .zip(&e.tokens.attention_mask)
                .filter(|(_, &m)| m == 1)
                .map(|(id, _)| id.to_string())
                .collect();
            out.push_str(&format!("{}\t{}\n", e.label, ids.join(" ")));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format(format!("dataset: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some(DATASET_MAGIC) {
            return Err(bad("missing header".into()));
        }
        let mut fields = BTreeMap::new();
        let mut extra = Vec::new();
        for line in lines.by_ref() {
            if line == "---" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("bad header line {line:?}")))?;
            match k {
                "task" | "codebook" | "tokenizer" | "seed" => {
                    fields.insert(k.to_string(), v.to_string());
                }
                _ => extra.push((k.to_string(), v.to_string())),
            }
        }
        let get = |k: &str| fields.get(k).cloned().ok_or_else(|| bad(format!("missing `{k}`")));
        let task: Task = get("task")?.parse()?;
        let header = DatasetHeader {
            task,
            codebook_hash: get("codebook")?,
            tokenizer_hash: get("tokenizer")?,
            seed: get("seed")?.parse().map_err(|_| bad("bad seed".into()))?,
            extra,
        };
        let mut examples = Vec::new();
        for (n, line) in lines.enumerate() {
            let (label, ids) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("example {}: missing tab", n + 1)))?;
            let label: usize = label
                .parse()
                .map_err(|_| bad(format!("example {}: bad label {label:?}", n + 1)))?;
            if label >= task.n_classes() {
                return Err(Error::Domain(format!(
                    "example {}: label {label} outside {} classes",
                    n + 1,
                    task.n_classes()
                )));
            }
            let ids = ids
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<Vec<u32>, _>>()
                .map_err(|_| bad(format!("example {}: bad token id", n + 1)))?;
            if ids.is_empty() {
                return Err(bad(format!("example {}: no tokens", n + 1)));
            }
            examples.push(LabeledSequence {
                tokens: TokenizedSequence {
                    attention_mask: vec![1; ids.len()],
                    ids,
                    overflow: false,
                },
                label,
            });
        }
        Ok(Self { header, examples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
