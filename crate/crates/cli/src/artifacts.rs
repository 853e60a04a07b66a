//! Artifact layout, provenance sidecars and the two CLI-only text formats
//! (normalized windows and the symbol corpus).

use std::path::{Path, PathBuf};

use heartbert_core::rng::sha256_hex;
use heartbert_core::signal::NormalizedWindow;

use crate::error::CliError;

pub const WINDOWS: &str = "windows.hbw";
pub const CODEBOOK: &str = "codebook.hbq";
pub const CORPUS: &str = "corpus.hbc";
pub const VOCAB: &str = "vocab.txt";
pub const MERGES: &str = "merges.txt";
pub const ENCODER: &str = "encoder.hbck";
pub const PRETRAIN_LOG: &str = "pretrain.log";
pub const HYBRID: &str = "hybrid.hbck";
pub const FINETUNE_LOG: &str = "finetune.log";
pub const METRICS: &str = "metrics.json";
pub const SPLITS: [&str; 3] = ["train.hbd", "val.hbd", "test.hbd"];

const PROV_MAGIC: &str = "HBPROV v1";
const WINDOWS_MAGIC: &str = "HBW v1";
const CORPUS_MAGIC: &str = "HBC v1";

pub fn prov_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".prov");
    PathBuf::from(s)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Provenance of one command run, attached to each of its outputs.
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Upstream file name and content hash.
    pub inputs: Vec<(String, String)>,
    pub overrides: Vec<(String, String)>,
}

impl Provenance {
    pub fn add_input(&mut self, path: &Path, hash: String) {
        self.inputs.push((file_name(path), hash));
    }

    /// `key=value` pairs for formats that carry their own header.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("command".to_string(), self.command.clone()),
            ("config".to_string(), self.config_hash.clone()),
        ];
        for (name, hash) in &self.inputs {
            out.push((format!("input.{name}"), hash.clone()));
        }
        for (k, v) in &self.overrides {
            out.push((format!("override.{k}"), v.clone()));
        }
        out
    }

    /// Writes `<artifact>.prov` recording the artifact's own hash.
    pub fn seal(&self, artifact: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(artifact).map_err(|e| CliError::io(artifact, e))?;
        let mut text = format!("{PROV_MAGIC}\nseed={}\n", self.seed);
        for (k, v) in self.pairs() {
            text.push_str(&format!("{k}={v}\n"));
        }
        text.push_str(&format!("output={}\n", sha256_hex(&bytes)));
        let path = prov_path(artifact);
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

/// Checks that an upstream artifact exists and, when it has a provenance
/// sidecar, still matches the hash recorded there. Returns its hash.
pub fn require(path: &Path) -> Result<String, CliError> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let hash = sha256_hex(&bytes);
    let prov = prov_path(path);
    if prov.exists() {
        let text = std::fs::read_to_string(&prov).map_err(|e| CliError::io(&prov, e))?;
        let recorded = text.lines().find_map(|l| l.strip_prefix("output="));
        if recorded != Some(hash.as_str()) {
            return Err(CliError::Data(format!(
                "{} does not match the hash in {}",
                path.display(),
                prov.display()
            )));
        }
    } else {
        log::warn!("{} has no provenance sidecar", path.display());
    }
    Ok(hash)
}

fn write_headed(path: &Path, magic: &str, pairs: &[(String, String)], body: &str) -> Result<(), CliError> {
    let mut text = format!("{magic}\n");
    for (k, v) in pairs {
        text.push_str(&format!("{k}={v}\n"));
    }
    text.push_str("---\n");
    text.push_str(body);
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_headed(path: &Path, magic: &str) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(magic) {
        return Err(CliError::Data(format!("{}: expected `{magic}` header", path.display())));
    }
    if !lines.by_ref().any(|l| l == "---") {
        return Err(CliError::Data(format!("{}: header is not terminated", path.display())));
    }
    Ok(lines.map(str::to_string).collect())
}

pub fn write_windows(path: &Path, windows: &[NormalizedWindow], prov: &Provenance) -> Result<(), CliError> {
    let mut body = String::new();
    for w in windows {
        let values: Vec<String> = w.samples().iter().map(|v| format!("{v:?}")).collect();
        body.push_str(&format!("{}\t{}\t{}\n", w.record_id(), w.offset(), values.join(" ")));
    }
    write_headed(path, WINDOWS_MAGIC, &prov.pairs(), &body)
}

pub fn read_windows(path: &Path) -> Result<Vec<NormalizedWindow>, CliError> {
    let bad = |n: usize, msg: &str| CliError::Data(format!("{} window {n}: {msg}", path.display()));
    read_headed(path, WINDOWS_MAGIC)?
        .iter()
        .enumerate()
        .map(|(n, line)| {
            let mut parts = line.splitn(3, '\t');
            let (Some(id), Some(offset), Some(values)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(n, "expected three tab-separated fields"));
            };
            let offset = offset.parse().map_err(|_| bad(n, "bad offset"))?;
            let samples = values
                .split(' ')
                .map(str::parse)
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|_| bad(n, "bad sample"))?;
            Ok(NormalizedWindow::new(samples, id, offset)?)
        })
        .collect()
}

pub fn write_corpus(path: &Path, lines: &[String], prov: &Provenance) -> Result<(), CliError> {
    let mut body = lines.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    write_headed(path, CORPUS_MAGIC, &prov.pairs(), &body)
}

pub fn read_corpus(path: &Path) -> Result<Vec<String>, CliError> {
    read_headed(path, CORPUS_MAGIC)
}
