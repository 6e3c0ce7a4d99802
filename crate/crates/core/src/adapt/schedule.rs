use serde::{Deserialize, Serialize};

use super::AdaptError;

/// Length of the base training run the preset windows are laid out for.
pub const PAPER_TRAINING_ITERATIONS: u64 = 500_000;

/// One cubic warmup window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupSegment {
    pub start: u64,
    pub duration: u64,
    pub lr_max: f64,
}

/// Piecewise schedule: inside a window the rate climbs as `lr_max * (t/duration)^3`,
/// between windows it holds the last maximum reached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub segments: Vec<WarmupSegment>,
}

impl WarmupSchedule {
    pub fn new(segments: Vec<WarmupSegment>) -> Result<Self, AdaptError> {
        let s = WarmupSchedule { segments };
        s.validate()?;
        Ok(s)
    }

    pub fn paper() -> Self {
        let seg = |start, lr_max| WarmupSegment { start, duration: 10_000, lr_max };
        WarmupSchedule { segments: vec![seg(0, 3e-4), seg(200_000, 0.7e-4), seg(400_000, 0.175e-4)] }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        if self.segments.is_empty() {
            return Err(AdaptError::Config("schedule needs at least one segment".into()));
        }
        for s in &self.segments {
            if s.duration == 0 || !(s.lr_max >= 0.0) || !s.lr_max.is_finite() {
                return Err(AdaptError::Config(format!("invalid warmup segment {s:?}")));
            }
        }
        for w in self.segments.windows(2) {
            if w[1].start < w[0].start + w[0].duration {
                return Err(AdaptError::Config(format!("warmup windows overlap or are unordered: {:?}, {:?}", w[0], w[1])));
            }
        }
        Ok(())
    }

    /// Scales window positions and lengths from a `reference`-iteration
    /// run to `iterations`; maxima are unchanged.
    pub fn scaled(&self, reference: u64, iterations: u64) -> Self {
        let f = iterations as f64 / reference as f64;
        let segments = self
            .segments
            .iter()
            .map(|s| WarmupSegment {
                start: (s.start as f64 * f).round() as u64,
                duration: ((s.duration as f64 * f).round() as u64).max(1),
                lr_max: s.lr_max,
            })
            .collect();
        WarmupSchedule { segments }
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        let mut lr = 0.0;
        for s in &self.segments {
            if iteration < s.start {
                break;
            }
            let t = iteration - s.start;
            if t >= s.duration {
                lr = s.lr_max;
            } else {
                let r = t as f64 / s.duration as f64;
                return s.lr_max * (r * r * r);
            }
        }
        lr
    }
}

/// Learning-rate policy of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    Warmup(WarmupSchedule),
    Constant { lr: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, iteration: u64) -> f64 {
        match self {
            LrSchedule::Warmup(s) => s.lr_at(iteration),
            LrSchedule::Constant { lr } => *lr,
        }
    }
}
