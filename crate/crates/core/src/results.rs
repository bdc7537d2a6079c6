//! Evaluation results written by the downstream trainer.
//!
//! The trainer reads `export.conll` and `pairs.csv` and writes one JSON
//! object per (dataset, method) run:
//!
//! ```json
//! {"dataset": "fin", "method": "gda", "spec": {...},
//!  "P": 0.85, "R": 0.84, "F1": 0.845, "bertscore": 0.91}
//! ```
//!
//! `spec` is kept opaque. `bertscore` may be null or absent.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest allowed gap between the reported F1 and `2PR / (P + R)`.
pub const F1_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalResult {
    pub dataset: String,
    pub method: String,
    #[serde(default)]
    pub spec: serde_json::Value,
    #[serde(rename = "P", alias = "precision")]
    pub precision: f64,
    #[serde(rename = "R", alias = "recall")]
    pub recall: f64,
    #[serde(rename = "F1", alias = "f1")]
    pub f1: f64,
    #[serde(default)]
    pub bertscore: Option<f64>,
}

fn unit(name: &str, v: f64) -> std::result::Result<(), String> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(format!("{name} = {v} is outside [0, 1]"))
    }
}

impl EvalResult {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.dataset.is_empty() || self.method.is_empty() {
            return Err("dataset and method must be non-empty".into());
        }
        unit("P", self.precision)?;
        unit("R", self.recall)?;
        unit("F1", self.f1)?;
        if let Some(b) = self.bertscore {
            if !b.is_finite() {
                return Err(format!("bertscore = {b} is not finite"));
            }
        }
        let (p, r) = (self.precision, self.recall);
        let expected = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        if (self.f1 - expected).abs() > F1_TOLERANCE {
            return Err(format!("F1 = {} but P and R give {expected}", self.f1));
        }
        Ok(())
    }
}

/// Parses a results file: one object, an array of objects, or one object
/// per line. Every result is validated.
pub fn parse_results(text: &str) -> Result<Vec<EvalResult>> {
    let trimmed = text.trim_start();
    let results: Vec<EvalResult> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed)?
    } else if let Ok(one) = serde_json::from_str::<EvalResult>(trimmed) {
        vec![one]
    } else {
        trimmed
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?
    };
    for (index, r) in results.iter().enumerate() {
        r.validate().map_err(|message| Error::EvalResult { index, message })?;
    }
    Ok(results)
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<EvalResult>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(&text)
}

/// `method` against `baseline` on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset: String,
    pub method: String,
    pub baseline: String,
    pub f1_delta: f64,
    /// Absent unless both runs report BERTScore.
    pub bertscore_delta: Option<f64>,
}

impl Comparison {
    /// Whether `method` scored strictly above `baseline` on F1.
    pub fn f1_order(&self) -> Ordering {
        self.f1_delta.partial_cmp(&0.0).unwrap_or(Ordering::Equal)
    }
}

/// Compares `method` with `baseline` on every dataset that has both. When a
/// (dataset, method) pair occurs more than once the last result wins.
pub fn compare(results: &[EvalResult], method: &str, baseline: &str) -> Vec<Comparison> {
    let find = |dataset: &str, m: &str| results.iter().rev().find(|r| r.dataset == dataset && r.method == m);
    let mut datasets: Vec<&str> = Vec::new();
    for r in results {
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
    }
    datasets
        .into_iter()
        .filter_map(|d| {
            let (a, b) = (find(d, method)?, find(d, baseline)?);
            Some(Comparison {
                dataset: d.to_string(),
                method: method.to_string(),
                baseline: baseline.to_string(),
                f1_delta: a.f1 - b.f1,
                bertscore_delta: a.bertscore.zip(b.bertscore).map(|(x, y)| x - y),
            })
        })
        .collect()
}
