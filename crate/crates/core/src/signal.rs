//! ECG ingestion and the numeric half of signal conversion: Fourier-method
//! resampling, per-record min-max normalization and fixed-size windowing.

use std::fs;
use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Sampling rate every record is brought to before quantization.
pub const TARGET_RATE_HZ: f64 = 360.0;
/// Largest number of samples in one window.
pub const MAX_WINDOW_LEN: usize = 4000;

/// Magic prefix of the raw little-endian signal format.
pub const RAW_MAGIC: &[u8; 8] = b"HBSIG01\0";

/// A single-channel ECG recording.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    samples: Vec<f64>,
    sampling_rate_hz: f64,
    record_id: String,
    channel: String,
}

impl EcgRecord {
    pub fn new(
        samples: Vec<f64>,
        sampling_rate_hz: f64,
        record_id: impl Into<String>,
        channel: impl Into<String>,
    ) -> Result<Self> {
        let record_id = record_id.into();
        if samples.is_empty() {
            return Err(Error::EmptyInput(format!("record {record_id} has no samples")));
        }
        if !(sampling_rate_hz.is_finite() && sampling_rate_hz > 0.0) {
            return Err(Error::Parameter(format!(
                "sampling rate must be positive, got {sampling_rate_hz}"
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "record {record_id} sample {i} is {}",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sampling_rate_hz,
            record_id,
            channel: channel.into(),
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sampling_rate_hz(&self) -> f64 {
        self.sampling_rate_hz
    }

    pub fn record_id(&self) -> &str {
        &self.record_id
    }

    pub fn channel(&self) -> &str {
        &self.channel
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sampling_rate_hz
    }

    fn with_samples(&self, samples: Vec<f64>, sampling_rate_hz: f64) -> Self {
        Self {
            samples,
            sampling_rate_hz,
            record_id: self.record_id.clone(),
            channel: self.channel.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    /// `rate=<hz>` header line followed by one sample per line.
    Csv,
    /// [`RAW_MAGIC`], f64 LE rate, then f32 LE samples.
    RawF32,
}

impl RecordFormat {
    /// Guesses the format from a file extension (`.csv` or anything else = raw).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => RecordFormat::Csv,
            _ => RecordFormat::RawF32,
        }
    }
}

/// Reads a record; the record id is the file stem.
pub fn load_record(path: &Path, format: RecordFormat) -> Result<EcgRecord> {
    let record_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("record")
        .to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (rate, samples) = match format {
        RecordFormat::Csv => parse_csv(&bytes)?,
        RecordFormat::RawF32 => parse_raw(&bytes)?,
    };
    EcgRecord::new(samples, rate, record_id, "ECG")
}

fn parse_csv(bytes: &[u8]) -> Result<(f64, Vec<f64>)> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("missing `rate=` header".into()))?;
    let rate = header
        .trim()
        .strip_prefix("rate=")
        .ok_or_else(|| Error::Format(format!("expected `rate=<hz>` header, got {header:?}")))?
        .trim()
        .parse::<f64>()
        .map_err(|e| Error::Format(format!("bad sampling rate: {e}")))?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v = line
            .parse::<f64>()
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))?;
        samples.push(v);
    }
    Ok((rate, samples))
}

fn parse_raw(bytes: &[u8]) -> Result<(f64, Vec<f64>)> {
    if bytes.len() < 16 || &bytes[..8] != RAW_MAGIC {
        return Err(Error::Format("missing HBSIG01 header".into()));
    }
    let rate = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[16..];
    if !body.len().is_multiple_of(4) {
        return Err(Error::Format(format!(
            "payload of {} bytes is not a whole number of f32 samples",
            body.len()
        )));
    }
    let samples = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((rate, samples))
}

/// Writes a record in either supported format.
pub fn write_record(path: &Path, record: &EcgRecord, format: RecordFormat) -> Result<()> {
    let mut out = Vec::new();
    match format {
        RecordFormat::Csv => {
            writeln!(out, "rate={}", record.sampling_rate_hz).unwrap();
            for v in &record.samples {
                writeln!(out, "{v}").unwrap();
            }
        }
        RecordFormat::RawF32 => {
            out.extend_from_slice(RAW_MAGIC);
            out.extend_from_slice(&record.sampling_rate_hz.to_le_bytes());
            for &v in &record.samples {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Number of samples after resampling `n` samples from `src_hz` to `dst_hz`.
pub fn resampled_len(n: usize, src_hz: f64, dst_hz: f64) -> usize {
    (n as f64 * dst_hz / src_hz).round() as usize
}

/// Fourier-method resampling: the spectrum is truncated or zero-padded
/// around the Nyquist bin and inverse-transformed at the new length.
pub fn resample(record: &EcgRecord, target_hz: f64) -> Result<EcgRecord> {
    if !(target_hz.is_finite() && target_hz > 0.0) {
        return Err(Error::Parameter(format!(
            "target rate must be positive, got {target_hz}"
        )));
    }
    let n = record.len();
    let m = resampled_len(n, record.sampling_rate_hz, target_hz);
    if m == 0 {
        return Err(Error::Parameter(format!(
            "resampling {n} samples to {target_hz} Hz leaves no samples"
        )));
    }
    if m == n {
        return Ok(record.with_samples(record.samples.clone(), target_hz));
    }
    Ok(record.with_samples(fourier_resample(&record.samples, m), target_hz))
}

fn fourier_resample(x: &[f64], m: usize) -> Vec<f64> {
    let n = x.len();
    let mut planner = FftPlanner::<f64>::new();
    let mut spectrum: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut spectrum);

    let mut out = vec![Complex64::new(0.0, 0.0); m];
    let shared = n.min(m);
    // Bins 0..=(shared-1)/2 on each side carry over unchanged.
    let half = (shared - 1) / 2;
    out[0] = spectrum[0];
    for k in 1..=half {
        out[k] = spectrum[k];
        out[m - k] = spectrum[n - k];
    }
    if shared.is_multiple_of(2) {
        let k = shared / 2;
        match m.cmp(&n) {
            // Split the old Nyquist bin across +/- k.
            std::cmp::Ordering::Greater => {
                out[k] = spectrum[k] * 0.5;
                out[m - k] = spectrum[k] * 0.5;
            }
            // Fold +/- k of the old spectrum onto the new Nyquist bin.
            std::cmp::Ordering::Less => out[k] = spectrum[k] + spectrum[n - k],
            std::cmp::Ordering::Equal => out[k] = spectrum[k],
        }
    }
    planner.plan_fft_inverse(m).process(&mut out);
    let scale = 1.0 / n as f64;
    out.into_iter().map(|c| c.re * scale).collect()
}

/// Per-record min-max scaling onto `[0, 1]`; a constant record maps to 0.5.
pub fn normalize(record: &EcgRecord) -> EcgRecord {
    let (lo, hi) = record
        .samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let samples = if range > 0.0 {
        record
            .samples
            .iter()
            .map(|&v| ((v - lo) / range).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.5; record.len()]
    };
    record.with_samples(samples, record.sampling_rate_hz)
}

/// A contiguous run of normalized samples from one record.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedWindow {
    samples: Vec<f64>,
    record_id: String,
    offset: usize,
}

impl NormalizedWindow {
    pub fn new(samples: Vec<f64>, record_id: impl Into<String>, offset: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("window has no samples".into()));
        }
        if samples.len() > MAX_WINDOW_LEN {
            return Err(Error::Parameter(format!(
                "window of {} samples exceeds {MAX_WINDOW_LEN}",
                samples.len()
            )));
        }
        if let Some(v) = samples.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("window sample {v} outside [0, 1]")));
        }
        Ok(Self {
            samples,
            record_id: record_id.into(),
            offset,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn record_id(&self) -> &str {
        &self.record_id
    }

    pub fn offset(&self) -> usize {
        self.offset
    }
}

/// Splits a normalized record into consecutive windows of `max_len`
/// samples; the last one holds the remainder.
pub fn window(record: &EcgRecord, max_len: usize) -> Result<Vec<NormalizedWindow>> {
    if max_len == 0 || max_len > MAX_WINDOW_LEN {
        return Err(Error::Parameter(format!(
            "window length must be in 1..={MAX_WINDOW_LEN}, got {max_len}"
        )));
    }
    if record.is_empty() {
        return Err(Error::EmptyInput("cannot window an empty record".into()));
    }
    record
        .samples
        .chunks(max_len)
        .enumerate()
        .map(|(i, chunk)| NormalizedWindow::new(chunk.to_vec(), &record.record_id, i * max_len))
        .collect()
}

/// Resample to [`TARGET_RATE_HZ`], normalize, then window.
pub fn convert_record(record: &EcgRecord, max_len: usize) -> Result<Vec<NormalizedWindow>> {
    let resampled = resample(record, TARGET_RATE_HZ)?;
    window(&normalize(&resampled), max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(samples: Vec<f64>, rate: f64) -> EcgRecord {
        EcgRecord::new(samples, rate, "r", "ECG").unwrap()
    }

    #[test]
    fn csv_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        fs::write(&path, "rate=250\n0.1\n-0.2\n0.3\n").unwrap();
        let r = load_record(&path, RecordFormat::Csv).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r.sampling_rate_hz(), 250.0);
        assert_eq!(r.record_id(), "a");
        assert_eq!(r.samples(), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn csv_rejects_nan_and_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.csv");
        fs::write(&path, "rate=250\n0.1\nNaN\n").unwrap();
        assert!(matches!(
            load_record(&path, RecordFormat::Csv),
            Err(Error::NonFinite(_))
        ));
        fs::write(&path, "hz=250\n0.1\n").unwrap();
        assert!(matches!(
            load_record(&path, RecordFormat::Csv),
            Err(Error::Format(_))
        ));
        fs::write(&path, "rate=250\n").unwrap();
        assert!(matches!(
            load_record(&path, RecordFormat::Csv),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn raw_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        let mut bytes = RAW_MAGIC.to_vec();
        bytes.extend_from_slice(&500f64.to_le_bytes());
        for i in 0..1000 {
            bytes.extend_from_slice(&(i as f32 * 0.5).to_le_bytes());
        }
        fs::write(&path, bytes).unwrap();
        let r = load_record(&path, RecordFormat::RawF32).unwrap();
        assert_eq!(r.len(), 1000);
        assert_eq!(r.sampling_rate_hz(), 500.0);
        assert_eq!(r.samples()[999], 499.5);
    }

    #[test]
    fn raw_rejects_missing_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        fs::write(&path, b"garbage that is long enough").unwrap();
        assert!(matches!(
            load_record(&path, RecordFormat::RawF32),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn resample_length() {
        let r = rec((0..2500).map(|i| (i as f64 * 0.01).sin()).collect(), 250.0);
        let out = resample(&r, 360.0).unwrap();
        assert_eq!(out.len(), 3600);
        assert_eq!(out.sampling_rate_hz(), 360.0);
        assert!(resample(&r, 0.0).is_err());
        assert!(resample(&r, -1.0).is_err());
    }

    #[test]
    fn resample_preserves_constant_and_odd_lengths() {
        for (n, src, dst) in [(7, 3.0, 5.0), (8, 5.0, 3.0), (9, 2.0, 4.0), (10, 4.0, 2.0)] {
            let r = rec(vec![1.5; n], src);
            let out = resample(&r, dst).unwrap();
            for v in out.samples() {
                assert!((v - 1.5).abs() < 1e-12, "{n} {src}->{dst}: {v}");
            }
        }
    }

    #[test]
    fn fourier_path_identity_at_same_length() {
        let xs: Vec<f64> = (0..257).map(|i| (i as f64 * 0.37).cos() + 0.1 * i as f64).collect();
        for n in [256, 257] {
            let out = fourier_resample(&xs[..n], n);
            for (a, b) in out.iter().zip(&xs) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let n = normalize(&rec(vec![2.0, 4.0, 6.0], 1.0));
        assert_eq!(n.samples(), &[0.0, 0.5, 1.0]);
        let n = normalize(&rec(vec![7.0, 7.0, 7.0], 1.0));
        assert_eq!(n.samples(), &[0.5, 0.5, 0.5]);
        let n = normalize(&rec(vec![-1.0, 0.0, 1.0], 1.0));
        assert_eq!(n.samples(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn window_examples() {
        let lens = |n: usize| {
            window(&rec(vec![0.5; n], 360.0), MAX_WINDOW_LEN)
                .unwrap()
                .iter()
                .map(NormalizedWindow::len)
                .collect::<Vec<_>>()
        };
        assert_eq!(lens(9000), vec![4000, 4000, 1000]);
        assert_eq!(lens(4000), vec![4000]);
        assert_eq!(lens(1), vec![1]);
        assert!(window(&rec(vec![0.5; 3], 1.0), 0).is_err());
        assert!(window(&rec(vec![2.0; 3], 1.0), 2).is_err());
    }

    proptest! {
        #[test]
        fn windows_concatenate_to_input(xs in prop::collection::vec(0.0f64..=1.0, 1..9000), len in 1usize..=4000) {
            let r = rec(xs.clone(), 360.0);
            let ws = window(&r, len).unwrap();
            let joined: Vec<f64> = ws.iter().flat_map(|w| w.samples().iter().copied()).collect();
            prop_assert_eq!(joined, xs);
            for (i, w) in ws.iter().enumerate() {
                prop_assert_eq!(w.offset(), i * len);
                if i + 1 < ws.len() {
                    prop_assert_eq!(w.len(), len);
                }
            }
        }

        #[test]
        fn normalize_is_bounded_and_idempotent(xs in prop::collection::vec(-1e3f64..1e3, 1..200)) {
            let once = normalize(&rec(xs, 1.0));
            prop_assert!(once.samples().iter().all(|v| (0.0..=1.0).contains(v)));
            let twice = normalize(&once);
            for (a, b) in once.samples().iter().zip(twice.samples()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn resample_length_law(n in 2usize..600, src in 50.0f64..1000.0, dst in 50.0f64..1000.0) {
            let r = rec((0..n).map(|i| (i as f64).sin()).collect(), src);
            match resample(&r, dst) {
                Ok(out) => prop_assert_eq!(out.len(), resampled_len(n, src, dst)),
                Err(_) => prop_assert_eq!(resampled_len(n, src, dst), 0),
            }
        }

        #[test]
        fn resample_identity(xs in prop::collection::vec(-5.0f64..5.0, 2..300), rate in 1.0f64..1000.0) {
            let r = rec(xs.clone(), rate);
            let out = resample(&r, rate).unwrap();
            for (a, b) in out.samples().iter().zip(&xs) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }
}
