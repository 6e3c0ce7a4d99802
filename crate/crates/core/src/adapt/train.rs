use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::curves::{CurvePoint, EVAL_EVERY};
use super::schedule::LrSchedule;
use super::{AdaptError, Result};
use crate::augment::{augment_sample, AugmentRanges, Combo};
use crate::ctc::{ctc_loss_grad, CtcError};
use crate::dataset::{pad_and_stack, sample_indices, Dataset};
use crate::eval::CerReport;
use crate::numerics::Adam;
use crate::raster::Image;
use crate::recognizer::{sample_log_probs, Recognizer};
use crate::ctc::best_path_decode;

/// Lines per forward pass during evaluation.
const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub iterations: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub combo: Combo,
    pub ranges: AugmentRanges,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub points: Vec<CurvePoint>,
    /// Training samples dropped because their target did not fit the output.
    pub skipped: usize,
    pub iterations: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean CTC loss over feasible lines.
    pub loss: f64,
    pub cer: f64,
    pub skipped: usize,
    /// Decoded text per evaluated line, in input order.
    pub hypotheses: Vec<String>,
}

/// Loss and CER of `model` on records `indices`, without augmentation.
///
/// Lines are grouped by width before batching so padding stays small; the
/// grouping is deterministic, so results do not depend on call history.
pub fn evaluate(model: &Recognizer, data: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    let cfg = model.config();
    let mut order: Vec<usize> = (0..indices.len()).collect();
    order.sort_by_key(|&k| data.images[indices[k]].width());
    let mut hypotheses = vec![String::new(); indices.len()];
    let (mut total, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for chunk in order.chunks(EVAL_BATCH) {
        let images: Vec<Image> = chunk.iter().map(|&k| data.images[indices[k]].clone()).collect();
        let x = pad_and_stack(&images, cfg.width_multiple(), cfg.input_channels);
        let lp = model.forward(&x)?;
        for (row, &k) in chunk.iter().enumerate() {
            let sample = sample_log_probs(&lp, row);
            hypotheses[k] = data.alphabet.decode(&best_path_decode(&sample));
            match ctc_loss_grad(&sample, &data.labels[indices[k]]) {
                Ok((loss, _)) => {
                    total += loss;
                    used += 1;
                }
                Err(CtcError::InfeasibleTarget { .. }) => skipped += 1,
                Err(e) => return Err(AdaptError::Recognizer(e.into())),
            }
        }
    }
    if used == 0 {
        return Err(AdaptError::NothingToEvaluate(indices.len()));
    }
    let refs: Vec<&str> = indices.iter().map(|&i| data.text(i)).collect();
    let cer = CerReport::new(&refs, &hypotheses)?.cer;
    Ok(Evaluation { loss: total / used as f64, cer, skipped, hypotheses })
}

/// Runs `opts.iterations` Adam steps on batches drawn with replacement from
/// `train_pool`, recording a curve point every 20 iterations against
/// `eval_set`.
///
/// Batch composition and augmentation draw from separate streams derived from
/// `opts.seed`, so a fixed seed reproduces the final parameters bit for bit.
pub fn train(
    model: &mut Recognizer,
    optimizer: &mut Adam,
    data: &Dataset,
    train_pool: &[usize],
    eval_set: &[usize],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if opts.iterations == 0 {
        return Ok(TrainOutcome { points: Vec::new(), skipped: 0, iterations: 0 });
    }
    if train_pool.is_empty() {
        return Err(AdaptError::Protocol("empty training pool".into()));
    }
    if opts.batch_size == 0 {
        return Err(AdaptError::Config("batch size must be positive".into()));
    }
    if eval_set.is_empty() {
        return Err(AdaptError::Protocol("empty evaluation set".into()));
    }
    if let Some(i) = eval_set.iter().find(|i| train_pool.contains(i)) {
        return Err(AdaptError::Protocol(format!("record {i} is in both the training pool and the evaluation set")));
    }
    let cfg = model.config().clone();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    batch_rng.set_stream(u64::MAX);
    let mut points = Vec::new();
    let (mut window_loss, mut window_n) = (0.0, 0usize);
    let mut skipped = 0;
    for it in 0..opts.iterations {
        let idx = sample_indices(train_pool, opts.batch_size, &mut batch_rng);
        let images: Vec<Image> = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let sample = it * opts.batch_size as u64 + j as u64;
                augment_sample(&opts.combo, &data.images[i], &opts.ranges, opts.seed, sample)
            })
            .collect();
        let batch = data.batch_from_images(&idx, &images, cfg.width_multiple(), cfg.input_channels);
        let out = model.loss_and_grad(&batch.images, &batch.targets)?;
        if out.skipped > 0 {
            debug!("iteration {}: skipped {} infeasible samples", it + 1, out.skipped);
            skipped += out.skipped;
        }
        if out.used > 0 {
            optimizer.step(model.params_mut().iter_mut(), &out.grads, opts.schedule.lr_at(it + 1));
            window_loss += out.loss;
            window_n += 1;
        }
        if (it + 1) % EVAL_EVERY == 0 {
            let ev = evaluate(model, data, eval_set)?;
            let train_loss = if window_n > 0 { window_loss / window_n as f64 } else { ev.loss };
            points.push(CurvePoint { iteration: it + 1, train_loss, test_loss: ev.loss, test_cer: ev.cer });
            debug!("iteration {}: train {:.4} test {:.4} cer {:.4}", it + 1, train_loss, ev.loss, ev.cer);
            window_loss = 0.0;
            window_n = 0;
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} training samples whose targets exceed the output length");
    }
    Ok(TrainOutcome { points, skipped, iterations: opts.iterations })
}
