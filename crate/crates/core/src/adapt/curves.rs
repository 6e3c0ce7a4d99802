use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdaptError, Result};
use crate::augment::Combo;

/// Evaluation cadence in iterations.
pub const EVAL_EVERY: u64 = 20;

/// What a curve was recorded for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveMeta {
    /// `base`, `finetune` or `fold`.
    pub kind: String,
    pub writer: Option<u64>,
    pub cluster: Option<usize>,
    pub run: Option<usize>,
    pub fold: Option<usize>,
    pub combo: Combo,
    pub seed: u64,
    pub iterations: u64,
}

impl CurveMeta {
    pub fn base(combo: Combo, seed: u64, iterations: u64) -> Self {
        CurveMeta { kind: "base".into(), writer: None, cluster: None, run: None, fold: None, combo, seed, iterations }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    /// Mean training loss over the iterations since the previous point.
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_cer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneCurves {
    pub meta: CurveMeta,
    pub points: Vec<CurvePoint>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    curves: CurveMeta,
    points: usize,
}

impl FinetuneCurves {
    pub fn iterations(&self) -> Vec<u64> {
        self.points.iter().map(|p| p.iteration).collect()
    }

    pub fn train_loss(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.train_loss).collect()
    }

    pub fn test_loss(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.test_loss).collect()
    }

    pub fn test_cer(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.test_cer).collect()
    }

    /// Test CER of the point recorded at `iteration`.
    pub fn cer_at(&self, iteration: u64) -> Option<f64> {
        self.points.iter().find(|p| p.iteration == iteration).map(|p| p.test_cer)
    }

    /// Points must sit exactly on the evaluation grid `20, 40, ...`.
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p.iteration != (i as u64 + 1) * EVAL_EVERY {
                return Err(AdaptError::Curves(format!("point {i} at iteration {}, expected {}", p.iteration, (i as u64 + 1) * EVAL_EVERY)));
            }
            if ![p.train_loss, p.test_loss, p.test_cer].iter().all(|v| v.is_finite()) {
                return Err(AdaptError::Curves(format!("non-finite value at iteration {}", p.iteration)));
            }
        }
        Ok(())
    }

    /// Header line followed by one line per point.
    pub fn to_jsonl(&self) -> String {
        let header = Header { curves: self.meta.clone(), points: self.points.len() };
        let mut out = serde_json::to_string(&header).expect("serializable");
        out.push('\n');
        for p in &self.points {
            out.push_str(&serde_json::to_string(p).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Header = serde_json::from_str(lines.next().ok_or_else(|| AdaptError::Curves("empty file".into()))?)?;
        let points = lines.map(serde_json::from_str).collect::<Result<Vec<CurvePoint>, _>>()?;
        if points.len() != header.points {
            return Err(AdaptError::Curves(format!("header declares {} points, found {}", header.points, points.len())));
        }
        let c = FinetuneCurves { meta: header.curves, points };
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> FinetuneCurves {
        let mut meta = CurveMeta::base(Combo::parse("B1C1G1M1").unwrap(), 9, 60);
        meta.kind = "finetune".into();
        meta.writer = Some(21);
        meta.cluster = Some(16);
        let points = (1..=3)
            .map(|i| CurvePoint { iteration: i * 20, train_loss: 1.0 / i as f64, test_loss: 0.1 + 1e-17 * i as f64, test_cer: 0.3 / 7.0 })
            .collect();
        FinetuneCurves { meta, points }
    }

    #[test]
    fn jsonl_round_trip_is_byte_identical() {
        let c = sample();
        let text = c.to_jsonl();
        let back = FinetuneCurves::from_jsonl(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_jsonl(), text);
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn rejects_off_grid_and_truncated() {
        let mut c = sample();
        c.points[1].iteration = 50;
        assert!(FinetuneCurves::from_jsonl(&c.to_jsonl()).is_err());
        let text = sample().to_jsonl();
        let cut: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(FinetuneCurves::from_jsonl(&cut).is_err());
    }

    #[test]
    fn lookup_by_iteration() {
        let c = sample();
        assert_eq!(c.cer_at(40), Some(0.3 / 7.0));
        assert_eq!(c.cer_at(30), None);
    }
}
