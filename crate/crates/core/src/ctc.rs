//! Connectionist temporal classification: loss and exact gradient by
//! log-space forward-backward, greedy decoding, and a brute-force
//! alignment enumerator used as a test oracle.
//!
//! Class 0 is always the blank; symbol `i` of the [`Alphabet`] is class
//! `i + 1`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

pub const BLANK: usize = 0;

/// Rows of log-probabilities must exponentiate-sum to 1 within this.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Brute-force enumeration refuses more than this many class strings.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("infeasible target: {target_len} labels need at least {required} frames, got {frames}")]
    InfeasibleTarget { target_len: usize, required: usize, frames: usize },

    #[error("log-probabilities at frame {frame} are not normalized (sum of exp = {sum})")]
    NotNormalized { frame: usize, sum: f64 },

    #[error("label {label} outside [1, {max}]")]
    InvalidLabel { label: usize, max: usize },

    #[error("characters not in alphabet: {0:?}")]
    UnknownSymbols(Vec<char>),

    #[error("invalid alphabet: {0}")]
    InvalidAlphabet(String),

    #[error("log-probabilities must be [T, K] with T >= 1 and K >= 2, got {0:?}")]
    Shape(Vec<usize>),

    #[error("brute force over {classes}^{frames} alignments exceeds the enumeration limit")]
    TooLarge { classes: usize, frames: usize },
}

/// Ordered symbol set; the blank is implicit and never a member.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self, CtcError> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        if symbols.is_empty() {
            return Err(CtcError::InvalidAlphabet("no symbols".into()));
        }
        let mut seen = HashSet::new();
        for &c in &symbols {
            if !seen.insert(c) {
                return Err(CtcError::InvalidAlphabet(format!("duplicate symbol {c:?}")));
            }
            if c.is_control() {
                return Err(CtcError::InvalidAlphabet(format!("control character {c:?}")));
            }
        }
        Ok(Alphabet { symbols })
    }

    /// Lowercase basic-latin letters, digits and space.
    pub fn latin() -> Self {
        Alphabet::new(('a'..='z').chain('0'..='9').chain([' '])).unwrap()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn as_string(&self) -> String {
        self.symbols.iter().collect()
    }

    /// Number of output classes including the blank.
    pub fn class_count(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn contains(&self, c: char) -> bool {
        self.symbols.contains(&c)
    }

    pub fn encode(&self, text: &str) -> Result<LabelSequence, CtcError> {
        let mut ids = Vec::with_capacity(text.len());
        let mut unknown = Vec::new();
        for c in text.chars() {
            match self.symbols.iter().position(|&s| s == c) {
                Some(i) => ids.push(i + 1),
                None if !unknown.contains(&c) => unknown.push(c),
                None => {}
            }
        }
        if unknown.is_empty() {
            Ok(LabelSequence(ids))
        } else {
            Err(CtcError::UnknownSymbols(unknown))
        }
    }

    pub fn decode(&self, labels: &LabelSequence) -> String {
        labels.0.iter().filter_map(|&id| self.symbols.get(id.wrapping_sub(1))).collect()
    }
}

/// Target class ids, blanks excluded.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fewest frames that can emit this sequence: one per label plus a
    /// separating blank between equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    fn validate(&self, classes: usize) -> Result<(), CtcError> {
        match self.0.iter().find(|&&l| l == BLANK || l >= classes) {
            Some(&label) => Err(CtcError::InvalidLabel { label, max: classes - 1 }),
            None => Ok(()),
        }
    }
}

fn dims(log_probs: &Tensor) -> Result<(usize, usize), CtcError> {
    match *log_probs.shape() {
        [t, k] if k >= 2 => Ok((t, k)),
        _ => Err(CtcError::Shape(log_probs.shape().to_vec())),
    }
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Negative log-likelihood of `target` and its gradient with respect to
/// every entry of `log_probs` (`[T, K]`, rows normalized).
pub fn ctc_loss_grad(log_probs: &Tensor, target: &LabelSequence) -> Result<(f64, Tensor), CtcError> {
    let (_, k) = dims(log_probs)?;
    for (frame, row) in log_probs.data().chunks_exact(k).enumerate() {
        let sum: f64 = row.iter().map(|v| v.exp()).sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(CtcError::NotNormalized { frame, sum });
        }
    }
    ctc_forward_backward(log_probs, target)
}

/// [`ctc_loss_grad`] without the normalization check: treats `log_probs` as
/// free per-frame log-scores.
pub fn ctc_forward_backward(log_probs: &Tensor, target: &LabelSequence) -> Result<(f64, Tensor), CtcError> {
    let (t_len, k) = dims(log_probs)?;
    target.validate(k)?;
    let required = target.min_frames();
    if t_len < required {
        return Err(CtcError::InfeasibleTarget { target_len: target.len(), required, frames: t_len });
    }
    let lp = |t: usize, c: usize| log_probs.data()[t * k + c];

    // Extended sequence with blanks interleaved: blank, l1, blank, l2, ..., blank.
    let s_len = 2 * target.len() + 1;
    let ext: Vec<usize> = (0..s_len).map(|s| if s % 2 == 0 { BLANK } else { target.0[s / 2] }).collect();
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, ext[s]) };
        }
    }

    let mut beta = vec![ninf; t_len * s_len];
    let last = t_len - 1;
    beta[last * s_len + s_len - 1] = lp(last, ext[s_len - 1]);
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = lp(last, ext[s_len - 2]);
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, ext[s]) };
        }
    }

    let mut log_p = alpha[last * s_len + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last * s_len + s_len - 2]);
    }

    let mut grad = vec![0.0; t_len * k];
    let mut occupancy = vec![ninf; k];
    for t in 0..t_len {
        occupancy.fill(ninf);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            occupancy[ext[s]] = log_add(occupancy[ext[s]], ab);
        }
        for c in 0..k {
            if occupancy[c] != ninf {
                grad[t * k + c] = -(occupancy[c] - log_p - lp(t, c)).exp();
            }
        }
    }
    Ok((-log_p, Tensor::new(vec![t_len, k], grad).expect("shape matches input")))
}

/// Collapses a frame-level class path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != BLANK {
            out.push(c);
        }
        prev = Some(c);
    }
    LabelSequence(out)
}

/// Exhaustive oracle: `-log` of the summed probability of every length-`T`
/// class string that collapses to `target`. Returns `+inf` when none does.
pub fn ctc_brute_force(log_probs: &Tensor, target: &LabelSequence) -> Result<f64, CtcError> {
    let (t_len, k) = dims(log_probs)?;
    target.validate(k)?;
    let total = (k as u128).checked_pow(t_len as u32).unwrap_or(u128::MAX);
    if total > BRUTE_FORCE_LIMIT {
        return Err(CtcError::TooLarge { classes: k, frames: t_len });
    }
    let mut path = vec![0usize; t_len];
    let mut acc = f64::NEG_INFINITY;
    for _ in 0..total {
        if collapse(&path) == *target {
            let score: f64 = path.iter().enumerate().map(|(t, &c)| log_probs.data()[t * k + c]).sum();
            acc = log_add(acc, score);
        }
        // Odometer increment, last frame fastest.
        for slot in path.iter_mut().rev() {
            *slot += 1;
            if *slot < k {
                break;
            }
            *slot = 0;
        }
    }
    Ok(-acc)
}

/// Greedy decoding of `[T, K]` log-probabilities: per-frame argmax (ties to
/// the lower class), then [`collapse`].
pub fn best_path_decode(log_probs: &Tensor) -> LabelSequence {
    let k = *log_probs.shape().last().unwrap();
    let path: Vec<usize> = log_probs
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}
