use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::estimate::snap_to_grid;
use super::{AdaptError, Result};

pub const DEFAULT_FIT_DEGREE: usize = 2;

/// Least-squares polynomial `I(N) = sum_k c_k * log2(N)^k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationFit {
    pub degree: usize,
    /// Ascending powers of `log2(N)`.
    pub coefficients: Vec<f64>,
    /// Largest absolute residual over the samples.
    pub max_residual: f64,
    pub samples: Vec<(usize, f64)>,
}

pub fn fit_iterations(samples: &[(usize, f64)], degree: usize) -> Result<IterationFit> {
    if samples.len() <= degree {
        return Err(AdaptError::Estimator(format!(
            "degree {degree} fit needs more than {degree} samples, got {}",
            samples.len()
        )));
    }
    if let Some(&(n, i)) = samples.iter().find(|&&(n, i)| n == 0 || !i.is_finite()) {
        return Err(AdaptError::Estimator(format!("invalid sample (N={n}, I={i})")));
    }
    let mut xs: Vec<f64> = samples.iter().map(|&(n, _)| (n as f64).log2()).collect();
    let a = DMatrix::from_fn(samples.len(), degree + 1, |r, c| xs[r].powi(c as i32));
    let b = DVector::from_iterator(samples.len(), samples.iter().map(|&(_, i)| i));
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() <= degree {
        return Err(AdaptError::Estimator(format!("degree {degree} fit needs more than {degree} distinct line counts")));
    }
    let svd = a.clone().svd(true, true);
    let coef = svd.solve(&b, 1e-12).map_err(|e| AdaptError::Estimator(e.to_string()))?;
    let max_residual = (&a * &coef - &b).amax();
    Ok(IterationFit { degree, coefficients: coef.iter().copied().collect(), max_residual, samples: samples.to_vec() })
}

impl IterationFit {
    pub fn value(&self, lines: usize) -> f64 {
        let x = (lines.max(1) as f64).log2();
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    /// Fitted value on the evaluation grid within `[20, budget]`.
    pub fn predict(&self, lines: usize, budget: u64) -> u64 {
        snap_to_grid(self.value(lines).max(0.0), budget)
    }
}

/// Finetuning budget for a writer with `lines` adaptation lines.
pub fn writer_dependent_budget(lines: usize) -> Option<u64> {
    match lines {
        0 => None,
        1..=99 => Some(1000),
        100..=499 => Some(2000),
        500..=999 => Some(3000),
        _ => Some(6000),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_linear_recovery() {
        let samples: Vec<(usize, f64)> = [1, 2, 4, 16, 64].iter().map(|&n| (n, 100.0 * (n as f64).log2())).collect();
        let fit = fit_iterations(&samples, 1).unwrap();
        assert!(fit.max_residual <= 1e-9);
        assert_eq!(fit.predict(8, 3000), 300);
    }

    #[test]
    fn constant_fit_is_the_mean() {
        let samples = [(4, 100.0), (16, 300.0), (64, 200.0)];
        let fit = fit_iterations(&samples, 0).unwrap();
        assert!((fit.value(1000) - 200.0).abs() < 1e-9);
        assert_eq!(fit.predict(3, 1000), 200);
    }

    #[test]
    fn prediction_is_clamped() {
        let fit = fit_iterations(&[(1, 5000.0), (2, 5000.0)], 0).unwrap();
        assert_eq!(fit.predict(1, 1000), 1000);
        let fit = fit_iterations(&[(1, -50.0), (2, -50.0)], 0).unwrap();
        assert_eq!(fit.predict(1, 1000), 20);
    }

    #[test]
    fn underdetermined_is_an_error() {
        assert!(fit_iterations(&[(4, 1.0), (8, 2.0)], 2).is_err());
        assert!(fit_iterations(&[(4, 1.0), (4, 2.0), (4, 3.0)], 2).is_err());
        assert!(fit_iterations(&[(0, 1.0), (4, 2.0)], 0).is_err());
    }

    #[test]
    fn budget_thresholds() {
        assert_eq!(writer_dependent_budget(0), None);
        assert_eq!(writer_dependent_budget(1), Some(1000));
        assert_eq!(writer_dependent_budget(100), Some(2000));
        assert_eq!(writer_dependent_budget(500), Some(3000));
        assert_eq!(writer_dependent_budget(1000), Some(6000));
    }
}
