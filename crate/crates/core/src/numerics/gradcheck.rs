use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, Result, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Central-difference half step.
    pub eps: f64,
    /// Gradients smaller than this are compared in absolute terms:
    /// the error is `|a - n| / max(|a|, |n|, abs_floor)`.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen coordinates per parameter.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions { eps: 1e-4, abs_floor: 1e-8, coords_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Worst relative error per parameter tensor.
    pub per_param: Vec<f64>,
    /// `(param, coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences `(f(x+eps) - f(x-eps)) / (2 eps)`.
///
/// `f` receives a fresh tape with `params` registered as trainable leaves
/// (in order) and returns the loss variable.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], opts: &FdOptions) -> Result<FdReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.eps > 0.0 && opts.eps.is_finite()) {
        return Err(NumericsError::InvalidArgument(format!("perturbation eps must be positive, got {}", opts.eps)));
    }
    let mut eval = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        if !tape.value(loss).is_scalar() {
            return Err(NumericsError::NonScalarLoss(tape.value(loss).shape().to_vec()));
        }
        Ok((tape, vars, loss))
    };

    let (tape, vars, loss) = eval(params)?;
    let base = tape.value(loss).item();
    let analytic: Vec<Tensor> = {
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };
    drop(tape);
    let again = {
        let (tape, _, loss) = eval(params)?;
        tape.value(loss).item()
    };
    if base.to_bits() != again.to_bits() {
        return Err(NumericsError::NonDeterministic { first: base, second: again });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = FdReport { max_rel_error: 0.0, per_param: vec![0.0; params.len()], worst: (0, 0), coords_checked: 0 };
    for pi in 0..params.len() {
        let n = params[pi].len();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params[pi].data()[c];
            work[pi].data_mut()[c] = orig + opts.eps;
            let (tp, _, lp) = eval(&work)?;
            let plus = tp.value(lp).item();
            drop(tp);
            work[pi].data_mut()[c] = orig - opts.eps;
            let (tm, _, lm) = eval(&work)?;
            let minus = tm.value(lm).item();
            drop(tm);
            work[pi].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[pi].data()[c];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let err = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if err > report.per_param[pi] {
                report.per_param[pi] = err;
            }
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (pi, c);
            }
        }
    }
    Ok(report)
}
