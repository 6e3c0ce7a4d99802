//! Edit distance, character error rate, relative CER reduction and the
//! two-level (runs within writers, then writers) aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("baseline CER must be positive, got {0}")]
    NonPositiveBaseline(f64),

    #[error("{references} references but {hypotheses} hypotheses")]
    Misaligned { references: usize, hypotheses: usize },

    #[error("nothing to aggregate")]
    Empty,
}

/// Levenshtein distance with unit costs, over any comparable items.
pub fn edit_distance_by<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = diag + usize::from(x != y);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[b.len()]
}

/// Character-level Levenshtein distance.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    edit_distance_by(&a, &b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub reference: String,
    pub hypothesis: String,
    pub distance: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CerReport {
    pub samples: Vec<SampleScore>,
    pub cer: f64,
}

impl CerReport {
    pub fn new<R: AsRef<str>, H: AsRef<str>>(references: &[R], hypotheses: &[H]) -> Result<Self, EvalError> {
        if references.len() != hypotheses.len() {
            return Err(EvalError::Misaligned { references: references.len(), hypotheses: hypotheses.len() });
        }
        let samples: Vec<SampleScore> = references
            .iter()
            .zip(hypotheses)
            .map(|(r, h)| SampleScore {
                reference: r.as_ref().to_string(),
                hypothesis: h.as_ref().to_string(),
                distance: edit_distance(r.as_ref(), h.as_ref()),
            })
            .collect();
        let dist: usize = samples.iter().map(|s| s.distance).sum();
        let len: usize = samples.iter().map(|s| s.reference.chars().count()).sum();
        Ok(CerReport { cer: dist as f64 / len.max(1) as f64, samples })
    }
}

/// Total edit distance over total reference length (at least 1).
pub fn cer<R: AsRef<str>, H: AsRef<str>>(references: &[R], hypotheses: &[H]) -> Result<f64, EvalError> {
    Ok(CerReport::new(references, hypotheses)?.cer)
}

/// `(F - B) / B`; negative values are improvements.
pub fn relative_reduction(baseline: f64, finetuned: f64) -> Result<f64, EvalError> {
    if !(baseline > 0.0) {
        return Err(EvalError::NonPositiveBaseline(baseline));
    }
    Ok((finetuned - baseline) / baseline)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionRecord {
    pub baseline: f64,
    pub finetuned: f64,
    pub reduction: f64,
}

impl ReductionRecord {
    pub fn new(baseline: f64, finetuned: f64) -> Result<Self, EvalError> {
        Ok(ReductionRecord { baseline, finetuned, reduction: relative_reduction(baseline, finetuned)? })
    }
}

/// Summary of per-writer means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WriterStats {
    pub per_writer: BTreeMap<u64, f64>,
    pub mean: f64,
    /// Population standard deviation across writers.
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Averages each writer's runs, then summarizes across writers.
pub fn aggregate(values_by_writer: &BTreeMap<u64, Vec<f64>>) -> Result<WriterStats, EvalError> {
    let per_writer: BTreeMap<u64, f64> = values_by_writer
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(&w, v)| (w, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    if per_writer.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut means: Vec<f64> = per_writer.values().copied().collect();
    means.sort_by(f64::total_cmp);
    let n = means.len() as f64;
    let mean = means.iter().sum::<f64>() / n;
    let std = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(WriterStats {
        mean,
        std,
        min: means[0],
        q1: quantile(&means, 0.25),
        median: quantile(&means, 0.5),
        q3: quantile(&means, 0.75),
        max: means[means.len() - 1],
        per_writer,
    })
}

/// Linear interpolation between order statistics (sorted input).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}
