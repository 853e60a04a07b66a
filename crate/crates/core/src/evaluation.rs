//! Confusion-matrix metrics for single-label multi-class predictions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: usize,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub n_classes: usize,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub micro: Averages,
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    pub per_class: Vec<ClassScores>,
    /// Metrics whose denominator was zero and were reported as 0.
    #[serde(default)]
    pub zero_denominators: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
}

fn ratio(num: u64, den: u64, name: String, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name);
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64, name: String, flags: &mut Vec<String>) -> f64 {
    if p + r == 0.0 {
        flags.push(name);
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn evaluate(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput("no predictions to evaluate".into()));
    }
    if let Some(v) = preds.iter().chain(labels).find(|&&v| v >= n_classes) {
        return Err(Error::Domain(format!("class {v} outside {n_classes} classes")));
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let total = preds.len() as u64;
    let mut flags = Vec::new();
    let mut per_class = Vec::with_capacity(n_classes);
    let (mut tp_all, mut fp_all, mut fn_all) = (0u64, 0u64, 0u64);
    for k in 0..n_classes {
        let tp = confusion[k][k];
        let predicted: u64 = (0..n_classes).map(|i| confusion[i][k]).sum();
        let actual: u64 = confusion[k].iter().sum();
        tp_all += tp;
        fp_all += predicted - tp;
        fn_all += actual - tp;
        let p = ratio(tp, predicted, format!("precision[{k}]"), &mut flags);
        let r = ratio(tp, actual, format!("recall[{k}]"), &mut flags);
        let f1 = harmonic(p, r, format!("f1[{k}]"), &mut flags);
        per_class.push(ClassScores { class: k, p, r, f1 });
    }
    let micro_p = ratio(tp_all, tp_all + fp_all, "micro precision".into(), &mut flags);
    let micro_r = ratio(tp_all, tp_all + fn_all, "micro recall".into(), &mut flags);
    let micro = Averages {
        p: micro_p,
        r: micro_r,
        f1: harmonic(micro_p, micro_r, "micro f1".into(), &mut flags),
    };
    let n = n_classes as f64;
    let macro_avg = Averages {
        p: per_class.iter().map(|c| c.p).sum::<f64>() / n,
        r: per_class.iter().map(|c| c.r).sum::<f64>() / n,
        f1: per_class.iter().map(|c| c.f1).sum::<f64>() / n,
    };
    Ok(MetricsReport {
        task: String::new(),
        n_classes,
        confusion,
        accuracy: tp_all as f64 / total as f64,
        micro,
        macro_avg,
        per_class,
        zero_denominators: flags,
    })
}

impl MetricsReport {
    pub fn with_task(mut self, task: impl Into<String>) -> Self {
        self.task = task.into();
        self
    }

    pub fn samples(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("metrics report: {e}")))
    }

    /// One row per class, then Micro and Macro rows, accuracy, and the
    /// confusion matrix.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if !self.task.is_empty() {
            let _ = writeln!(out, "task: {}", self.task);
        }
        let _ = writeln!(out, "{:<8} {:>9} {:>9} {:>9}", "class", "precision", "recall", "f1");
        for c in &self.per_class {
            let _ = writeln!(out, "{:<8} {:>9.4} {:>9.4} {:>9.4}", c.class, c.p, c.r, c.f1);
        }
        for (name, a) in [("Micro", self.micro), ("Macro", self.macro_avg)] {
            let _ = writeln!(out, "{name:<8} {:>9.4} {:>9.4} {:>9.4}", a.p, a.r, a.f1);
        }
        let _ = writeln!(out, "accuracy {:.4}", self.accuracy);
        let _ = writeln!(out, "confusion (rows true, columns predicted)");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "  {}", cells.join(" "));
        }
        out
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Table => self.to_table(),
            ReportFormat::Json => self.to_json(),
        }
    }
}
