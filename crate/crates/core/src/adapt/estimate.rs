use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::curves::EVAL_EVERY;
use super::{AdaptError, Result};

pub const SMOOTHING_WINDOW: usize = 4;
/// Floor on curve minima before min-normalization.
const NORMALIZATION_FLOOR: f64 = 1e-8;

/// Trailing moving average over up to `window` most recent points.
pub fn smooth(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "smoothing window must be at least 1");
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (i, &v) in series.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= series[i - window];
        }
        let n = (i + 1).min(window);
        out.push(if n == 1 { v } else { sum / n as f64 });
    }
    out
}

/// Index of the smallest value; ties go to the earliest index.
pub fn argmin(series: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in series.iter().enumerate() {
        if best.map_or(true, |b| v < series[b]) {
            best = Some(i);
        }
    }
    best
}

/// Iteration at which curve point `index` was recorded.
pub fn iteration_of(index: usize) -> u64 {
    (index as u64 + 1) * EVAL_EVERY
}

pub fn grid_len(budget: u64) -> usize {
    (budget / EVAL_EVERY) as usize
}

/// Nearest multiple of 20 (ties up), clamped to `[20, budget]`.
pub fn snap_to_grid(iterations: f64, budget: u64) -> u64 {
    let steps = (iterations / EVAL_EVERY as f64 + 0.5).floor().max(1.0) as u64;
    (steps * EVAL_EVERY).min(budget)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// Last iteration of the budget.
    L,
    /// Minimum of the test CER curve.
    O,
    /// Minimum of the averaged smoothed fold curves.
    A,
    /// Mean of the fold minima.
    M,
    /// Maximum of the fold minima.
    X,
    /// Minimum of other writers' averaged normalized curves.
    S,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [Strategy::L, Strategy::O, Strategy::A, Strategy::M, Strategy::X, Strategy::S];

    pub fn needs_folds(self) -> bool {
        matches!(self, Strategy::A | Strategy::M | Strategy::X)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Strategy {
    type Err = AdaptError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| AdaptError::Config(format!("unknown estimator {s:?}; expected one of L, O, A, M, X, S")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub strategy: Strategy,
    pub factor: f64,
    pub window: usize,
}

impl EstimatorSpec {
    pub fn new(strategy: Strategy, factor: f64) -> Result<Self> {
        let s = EstimatorSpec { strategy, factor, window: SMOOTHING_WINDOW };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor.is_finite()) {
            return Err(AdaptError::Config(format!("factor R must be positive, got {}", self.factor)));
        }
        if self.window == 0 {
            return Err(AdaptError::Config("smoothing window must be at least 1".into()));
        }
        Ok(())
    }

    /// Short label such as `X1.5`.
    pub fn label(&self) -> String {
        if self.factor == 1.0 {
            self.strategy.to_string()
        } else {
            format!("{}{}", self.strategy, self.factor)
        }
    }
}

/// Curves an estimate is computed from; which fields are needed depends on
/// the strategy.
#[derive(Clone, Copy, Debug, Default)]
pub struct StopInputs<'a> {
    pub budget: u64,
    pub test_cer: Option<&'a [f64]>,
    pub fold_losses: Option<&'a [Vec<f64>]>,
    /// Test-loss curves of every run, per writer.
    pub writer_losses: Option<&'a BTreeMap<u64, Vec<Vec<f64>>>>,
    /// Writer excluded from the S average.
    pub held_out_writer: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopEstimate {
    pub spec: EstimatorSpec,
    /// Estimate before the factor is applied.
    pub raw: u64,
    /// Chosen iteration on the evaluation grid within the budget.
    pub iteration: u64,
}

fn require_curve(c: &[f64], what: &str) -> Result<()> {
    if c.is_empty() {
        return Err(AdaptError::Estimator(format!("empty {what} curve")));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(AdaptError::Estimator(format!("non-finite value in {what} curve")));
    }
    Ok(())
}

fn mean_curve(curves: &[Vec<f64>]) -> Result<Vec<f64>> {
    let len = curves.first().map(Vec::len).unwrap_or(0);
    if curves.iter().any(|c| c.len() != len) {
        return Err(AdaptError::Estimator("curves to average have different lengths".into()));
    }
    Ok((0..len).map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64).collect())
}

fn smoothed_folds(folds: &[Vec<f64>], window: usize) -> Result<Vec<Vec<f64>>> {
    if folds.is_empty() {
        return Err(AdaptError::Estimator("no fold curves".into()));
    }
    folds
        .iter()
        .map(|f| {
            require_curve(f, "fold loss")?;
            Ok(smooth(f, window))
        })
        .collect()
}

/// A writer's run curves smoothed, averaged and divided by their minimum.
fn normalized_writer_curve(runs: &[Vec<f64>], window: usize) -> Result<Vec<f64>> {
    if runs.is_empty() {
        return Err(AdaptError::Estimator("writer without runs".into()));
    }
    for r in runs {
        require_curve(r, "test loss")?;
    }
    let smoothed: Vec<Vec<f64>> = runs.iter().map(|r| smooth(r, window)).collect();
    let avg = mean_curve(&smoothed)?;
    let min = avg.iter().copied().fold(f64::INFINITY, f64::min).max(NORMALIZATION_FLOOR);
    Ok(avg.iter().map(|v| v / min).collect())
}

/// Average of min-normalized curves of every writer but `held_out`.
pub fn static_curve(writers: &BTreeMap<u64, Vec<Vec<f64>>>, held_out: Option<u64>, window: usize) -> Result<Vec<f64>> {
    if writers.len() < 2 {
        return Err(AdaptError::Estimator(format!("S needs curves from at least 2 writers, got {}", writers.len())));
    }
    let others = writers
        .iter()
        .filter(|(&w, _)| Some(w) != held_out)
        .map(|(_, runs)| normalized_writer_curve(runs, window))
        .collect::<Result<Vec<_>>>()?;
    if others.is_empty() {
        return Err(AdaptError::Estimator("no writers left after holding one out".into()));
    }
    mean_curve(&others)
}

pub fn estimate_stop(spec: &EstimatorSpec, inputs: &StopInputs) -> Result<StopEstimate> {
    spec.validate()?;
    let budget = inputs.budget;
    if budget < EVAL_EVERY || budget % EVAL_EVERY != 0 {
        return Err(AdaptError::Estimator(format!("budget {budget} is not a positive multiple of {EVAL_EVERY}")));
    }
    let missing = |what: &str| AdaptError::Estimator(format!("estimator {} needs {what}", spec.strategy));
    let raw = match spec.strategy {
        Strategy::L => budget,
        Strategy::O => {
            let c = inputs.test_cer.ok_or_else(|| missing("a test CER curve"))?;
            require_curve(c, "test CER")?;
            iteration_of(argmin(c).expect("non-empty"))
        }
        Strategy::A => {
            let folds = smoothed_folds(inputs.fold_losses.ok_or_else(|| missing("fold curves"))?, spec.window)?;
            iteration_of(argmin(&mean_curve(&folds)?).expect("non-empty"))
        }
        Strategy::M | Strategy::X => {
            let folds = smoothed_folds(inputs.fold_losses.ok_or_else(|| missing("fold curves"))?, spec.window)?;
            let minima: Vec<u64> = folds.iter().map(|f| iteration_of(argmin(f).expect("non-empty"))).collect();
            if spec.strategy == Strategy::X {
                *minima.iter().max().expect("non-empty")
            } else {
                let mean = minima.iter().sum::<u64>() as f64 / minima.len() as f64;
                snap_to_grid(mean, u64::MAX)
            }
        }
        Strategy::S => {
            let writers = inputs.writer_losses.ok_or_else(|| missing("other writers' curves"))?;
            let curve = static_curve(writers, inputs.held_out_writer, spec.window)?;
            iteration_of(argmin(&curve).ok_or_else(|| AdaptError::Estimator("empty curves".into()))?)
        }
    };
    let iteration = snap_to_grid(raw as f64 * spec.factor, budget);
    Ok(StopEstimate { spec: *spec, raw, iteration })
}

/// Iterations per adaptation line for each cluster size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioTable {
    pub sizes: Vec<usize>,
    pub ratios: Vec<f64>,
}

impl RatioTable {
    /// Reference S with factor 3 ratios for clusters 1..256.
    pub fn paper_s3() -> Self {
        RatioTable {
            sizes: vec![1, 2, 4, 8, 16, 32, 64, 128, 256],
            ratios: vec![180.0, 90.0, 60.0, 38.0, 33.0, 30.0, 24.0, 15.0, 9.0],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper-S3" => Some(Self::paper_s3()),
            _ => None,
        }
    }

    pub fn ratio(&self, size: usize) -> Option<f64> {
        self.sizes.iter().position(|&s| s == size).map(|i| self.ratios[i])
    }

    /// `ratio * size` limited to the budget.
    pub fn iterations(&self, size: usize, budget: u64) -> Option<u64> {
        self.ratio(size).map(|r| ((r * size as f64).round() as u64).clamp(1, budget))
    }
}

/// Per cluster size, the S estimate over all writers divided by the size.
/// `curves[size][writer]` holds the test-loss curves of that writer's runs.
pub fn static_ratio_table(
    curves: &BTreeMap<usize, BTreeMap<u64, Vec<Vec<f64>>>>,
    budgets: &BTreeMap<usize, u64>,
    spec: &EstimatorSpec,
) -> Result<RatioTable> {
    let mut table = RatioTable { sizes: Vec::new(), ratios: Vec::new() };
    let spec = EstimatorSpec { strategy: Strategy::S, ..*spec };
    for (&size, writers) in curves {
        let budget = *budgets.get(&size).ok_or_else(|| AdaptError::Estimator(format!("no budget for cluster {size}")))?;
        let inputs = StopInputs { budget, writer_losses: Some(writers), ..Default::default() };
        let est = estimate_stop(&spec, &inputs)?;
        table.sizes.push(size);
        table.ratios.push(est.iteration as f64 / size as f64);
    }
    Ok(table)
}
