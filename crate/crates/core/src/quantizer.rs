//! Lloyd-Max scalar quantization of normalized samples and the mapping of
//! quantization cells onto a printable alphabet.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng;
use crate::signal::NormalizedWindow;

pub const DEFAULT_LEVELS: usize = 100;
/// Training never looks at more than this many samples.
pub const MAX_TRAINING_SAMPLES: usize = 10_000_000;

const CODEBOOK_MAGIC: &str = "HBQ v1";
const MIDPOINT_TOLERANCE: f64 = 1e-9;

/// Ordered set of distinct symbols; symbol `k` stands for quantization cell `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Alphabet {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        if chars.is_empty() {
            return Err(Error::Parameter("alphabet is empty".into()));
        }
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if c.is_whitespace() || c.is_control() {
                return Err(Error::Parameter(format!(
                    "alphabet character {c:?} is not printable"
                )));
            }
            if index.insert(c, i).is_some() {
                return Err(Error::Parameter(format!("alphabet repeats {c:?}")));
            }
        }
        Ok(Self { chars, index })
    }

    /// The 100-symbol alphabet: `A-Z`, `a-z`, `0-9`, the 32 ASCII
    /// punctuation marks, then `À` through `Å`.
    pub fn standard() -> Self {
        Self::with_levels(DEFAULT_LEVELS).expect("standard alphabet is valid")
    }

    /// The first `levels` symbols of the standard ordering.
    pub fn with_levels(levels: usize) -> Result<Self> {
        let all: Vec<char> = ('A'..='Z')
            .chain('a'..='z')
            .chain('0'..='9')
            .chain((b'!'..=b'~').map(char::from).filter(|c| c.is_ascii_punctuation()))
            .chain('\u{C0}'..='\u{C5}')
            .collect();
        if levels == 0 || levels > all.len() {
            return Err(Error::Parameter(format!(
                "standard alphabet supports 1..={} levels, got {levels}",
                all.len()
            )));
        }
        Self::new(all.into_iter().take(levels))
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn symbol(&self, index: usize) -> char {
        self.chars[index]
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn as_string(&self) -> String {
        self.chars.iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LloydMaxConfig {
    pub levels: usize,
    /// Stop once the relative distortion improvement drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Seeds the subsample drawn when the input exceeds `max_samples`.
    pub seed: u64,
    pub max_samples: usize,
}

impl Default for LloydMaxConfig {
    fn default() -> Self {
        Self {
            levels: DEFAULT_LEVELS,
            tol: 1e-7,
            max_iter: 200,
            seed: 0,
            max_samples: MAX_TRAINING_SAMPLES,
        }
    }
}

/// Diagnostics of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    /// Mean squared error of the nearest-centroid partition, one entry per iteration.
    pub distortion_history: Vec<f64>,
    pub converged: bool,
    pub samples_used: usize,
}

/// Reproduction levels, decision boundaries and the symbol for each cell.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerCodebook {
    centroids: Vec<f64>,
    boundaries: Vec<f64>,
    alphabet: Alphabet,
    training_distortion: Option<f64>,
}

impl QuantizerCodebook {
    /// Builds a codebook from centroids; boundaries are their midpoints.
    pub fn from_centroids(centroids: Vec<f64>, alphabet: Alphabet) -> Result<Self> {
        let boundaries = midpoints(&centroids);
        let book = Self {
            centroids,
            boundaries,
            alphabet,
            training_distortion: None,
        };
        book.validate()?;
        Ok(book)
    }

    fn validate(&self) -> Result<()> {
        let levels = self.centroids.len();
        if levels == 0 {
            return Err(Error::Format("codebook has no levels".into()));
        }
        if self.alphabet.len() != levels {
            return Err(Error::Format(format!(
                "alphabet has {} symbols for {levels} levels",
                self.alphabet.len()
            )));
        }
        if self.centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::Format("non-finite centroid".into()));
        }
        if self.centroids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("centroids are not strictly increasing".into()));
        }
        if self.boundaries.len() != levels - 1 {
            return Err(Error::Format(format!(
                "expected {} boundaries, found {}",
                levels - 1,
                self.boundaries.len()
            )));
        }
        for (i, (b, w)) in self.boundaries.iter().zip(self.centroids.windows(2)).enumerate() {
            if (b - (w[0] + w[1]) / 2.0).abs() > MIDPOINT_TOLERANCE {
                return Err(Error::Format(format!(
                    "boundary {i} = {b} is not the midpoint of its centroids"
                )));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn training_distortion(&self) -> Option<f64> {
        self.training_distortion
    }

    /// Cell index of `x`; a value on a boundary belongs to the lower cell.
    pub fn cell(&self, x: f64) -> usize {
        self.boundaries.partition_point(|&b| b < x)
    }

    /// Cell index of a sample, rejecting values outside `[0, 1]`.
    pub fn quantize(&self, x: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Domain(format!("sample {x} outside [0, 1]")));
        }
        Ok(self.cell(x))
    }

    /// Mean squared reconstruction error of `samples` under this codebook.
    pub fn distortion(&self, samples: &[f64]) -> f64 {
        let sse: f64 = samples
            .iter()
            .map(|&x| {
                let d = x - self.centroids[self.cell(x)];
                d * d
            })
            .sum();
        sse / samples.len() as f64
    }

    /// Serializes to the `HBQ v1` text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CODEBOOK_MAGIC}").unwrap();
        writeln!(out, "levels={}", self.levels()).unwrap();
        writeln!(out, "{}", self.alphabet.as_string()).unwrap();
        for (i, c) in self.centroids.iter().enumerate() {
            writeln!(out, "centroid {i} {c:?}").unwrap();
        }
        for (i, b) in self.boundaries.iter().enumerate() {
            writeln!(out, "boundary {i} {b:?}").unwrap();
        }
        if let Some(d) = self.training_distortion {
            writeln!(out, "distortion {d:?}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Format(format!("codebook truncated before {what}")))
        };
        let magic = next("header")?;
        if magic != CODEBOOK_MAGIC {
            return Err(Error::Format(format!("bad codebook header {magic:?}")));
        }
        let levels: usize = next("levels")?
            .strip_prefix("levels=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("bad `levels=` line".into()))?;
        let alphabet = Alphabet::new(next("alphabet")?.chars())
            .map_err(|e| Error::Format(format!("alphabet line: {e}")))?;
        let mut centroids = Vec::with_capacity(levels);
        let mut boundaries = Vec::with_capacity(levels.saturating_sub(1));
        let mut training_distortion = None;
        for line in lines {
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some("centroid"), Some(i), Some(v)) => {
                    push_indexed(&mut centroids, i, v, "centroid")?
                }
                (Some("boundary"), Some(i), Some(v)) => {
                    push_indexed(&mut boundaries, i, v, "boundary")?
                }
                (Some("distortion"), Some(v), None) => {
                    training_distortion = Some(parse_f64(v)?);
                }
                (None, ..) => {}
                _ => return Err(Error::Format(format!("unexpected codebook line {line:?}"))),
            }
        }
        if centroids.len() != levels {
            return Err(Error::Format(format!(
                "levels={levels} but {} centroids",
                centroids.len()
            )));
        }
        let book = Self {
            centroids,
            boundaries,
            alphabet,
            training_distortion,
        };
        book.validate()?;
        Ok(book)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn parse_f64(v: &str) -> Result<f64> {
    v.parse()
        .map_err(|e| Error::Format(format!("bad number {v:?}: {e}")))
}

fn push_indexed(dst: &mut Vec<f64>, i: &str, v: &str, what: &str) -> Result<()> {
    let i: usize = i
        .parse()
        .map_err(|_| Error::Format(format!("bad {what} index {i:?}")))?;
    if i != dst.len() {
        return Err(Error::Format(format!(
            "{what} {i} out of order (expected {})",
            dst.len()
        )));
    }
    dst.push(parse_f64(v)?);
    Ok(())
}

fn midpoints(centroids: &[f64]) -> Vec<f64> {
    centroids.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
}

/// Per-cell statistics of a sorted sample under a set of centroids.
struct Cells {
    /// `ends[k]` is one past the last sorted index in cell `k`.
    ends: Vec<usize>,
    sums: Vec<f64>,
    /// Squared error of each cell about its current centroid.
    sse: Vec<f64>,
}

impl Cells {
    fn assign(sorted: &[f64], centroids: &[f64]) -> Self {
        let levels = centroids.len();
        let mut ends: Vec<usize> = midpoints(centroids)
            .iter()
            .map(|&b| sorted.partition_point(|&x| x <= b))
            .collect();
        ends.push(sorted.len());
        let mut sums = vec![0.0; levels];
        let mut sse = vec![0.0; levels];
        let mut start = 0;
        for k in 0..levels {
            let c = centroids[k];
            for &x in &sorted[start..ends[k]] {
                sums[k] += x;
                sse[k] += (x - c) * (x - c);
            }
            start = ends[k];
        }
        Self { ends, sums, sse }
    }

    fn range(&self, k: usize) -> std::ops::Range<usize> {
        let start = if k == 0 { 0 } else { self.ends[k - 1] };
        start..self.ends[k]
    }
}

/// Trains a Lloyd-Max quantizer by alternating the nearest-neighbour
/// (midpoint boundary) and centroid conditions.
pub fn train_codebook(
    samples: &[f64],
    config: &LloydMaxConfig,
) -> Result<(QuantizerCodebook, TrainingReport)> {
    let levels = config.levels;
    if levels < 1 {
        return Err(Error::Parameter("levels must be at least 1".into()));
    }
    if !(config.tol >= 0.0) {
        return Err(Error::Parameter(format!("tolerance {} is invalid", config.tol)));
    }
    if let Some(x) = samples.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Domain(format!("training sample {x} outside [0, 1]")));
    }
    let alphabet = Alphabet::with_levels(levels)?;

    let mut sorted: Vec<f64> = if samples.len() > config.max_samples {
        let mut rng = rng::substream(config.seed, "quantizer/subsample");
        index::sample(&mut rng, samples.len(), config.max_samples)
            .into_iter()
            .map(|i| samples[i])
            .collect()
    } else {
        samples.to_vec()
    };
    sorted.sort_by(f64::total_cmp);

    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < levels {
        return Err(Error::Degenerate(format!(
            "{} distinct sample values for {levels} levels",
            distinct.len()
        )));
    }

    let n = sorted.len();
    let mut centroids = quantile_init(&sorted, levels);
    if centroids.windows(2).any(|w| w[0] >= w[1]) {
        centroids = quantile_init(&distinct, levels);
    }

    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iter {
        let cells = Cells::assign(&sorted, &centroids);
        let distortion = cells.sse.iter().sum::<f64>() / n as f64;
        let previous = history.last().copied();
        history.push(distortion);
        if distortion == 0.0 {
            converged = true;
            break;
        }
        if let Some(prev) = previous {
            if prev - distortion <= config.tol * prev {
                converged = true;
                break;
            }
        }

        let mut next: Vec<f64> = (0..levels)
            .filter_map(|k| {
                let count = cells.range(k).len();
                (count > 0).then(|| cells.sums[k] / count as f64)
            })
            .collect();
        while next.len() < levels {
            next = split_worst_cell(&sorted, next);
        }
        if next == centroids {
            converged = true;
            break;
        }
        centroids = next;
    }

    let mut book = QuantizerCodebook::from_centroids(centroids, alphabet)?;
    book.training_distortion = history.last().copied();
    let report = TrainingReport {
        distortion_history: history,
        converged,
        samples_used: n,
    };
    Ok((book, report))
}

fn quantile_init(sorted: &[f64], levels: usize) -> Vec<f64> {
    let n = sorted.len();
    (0..levels)
        .map(|i| sorted[(((2 * i + 1) * n) / (2 * levels)).min(n - 1)])
        .collect()
}

/// Adds one centroid inside the cell with the largest squared error about
/// its mean, at the mean of that cell's upper half.
fn split_worst_cell(sorted: &[f64], centroids: Vec<f64>) -> Vec<f64> {
    let cells = Cells::assign(sorted, &centroids);
    let mut worst: Option<(usize, f64)> = None;
    for k in 0..centroids.len() {
        let range = cells.range(k);
        let count = range.len();
        if count < 2 || sorted[range.start] == sorted[range.end - 1] {
            continue;
        }
        let mean = cells.sums[k] / count as f64;
        let offset = centroids[k] - mean;
        let spread = cells.sse[k] - count as f64 * offset * offset;
        if worst.is_none_or(|(_, s)| spread > s) {
            worst = Some((k, spread));
        }
    }
    let (k, _) = worst.expect("a cell with two distinct values exists when distinct >= levels");
    let cell = &sorted[cells.range(k)];
    let mean = cell.iter().sum::<f64>() / cell.len() as f64;
    let upper: Vec<f64> = cell.iter().copied().filter(|&x| x > mean).collect();
    let split = upper.iter().sum::<f64>() / upper.len() as f64;

    let mut out = centroids;
    out.push(split);
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// A window rendered as text over the codebook alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolSequence {
    pub text: String,
    pub record_id: String,
    pub offset: usize,
}

impl SymbolSequence {
    pub fn len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

/// Maps a sample slice to symbols via nearest centroid.
pub fn encode_samples(samples: &[f64], codebook: &QuantizerCodebook) -> Result<String> {
    samples
        .iter()
        .map(|&x| Ok(codebook.alphabet.symbol(codebook.quantize(x)?)))
        .collect()
}

pub fn encode_symbols(
    window: &NormalizedWindow,
    codebook: &QuantizerCodebook,
) -> Result<SymbolSequence> {
    Ok(SymbolSequence {
        text: encode_samples(window.samples(), codebook)?,
        record_id: window.record_id().to_string(),
        offset: window.offset(),
    })
}

/// Replaces each symbol with its cell's reproduction value.
pub fn decode_symbols(text: &str, codebook: &QuantizerCodebook) -> Result<Vec<f64>> {
    text.chars()
        .map(|c| {
            codebook
                .alphabet
                .index_of(c)
                .map(|k| codebook.centroids[k])
                .ok_or(Error::Symbol(c))
        })
        .collect()
}
