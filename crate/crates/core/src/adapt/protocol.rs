use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::curves::{CurveMeta, FinetuneCurves, EVAL_EVERY};
use super::schedule::LrSchedule;
use super::train::{train, TrainOptions};
use super::{derive_seed, AdaptError, Result};
use crate::augment::{AugmentRanges, Combo};
use crate::dataset::{nested_clusters, Dataset, Split, TARGET_ADAPT_LINES, TARGET_TEST_LINES};
use crate::numerics::Adam;
use crate::recognizer::Recognizer;

/// Smallest cluster on which cross-validation is run.
pub const MIN_CV_LINES: usize = 16;

/// Cluster sizes with their iteration budgets, runs per writer and fold count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterProtocol {
    pub sizes: Vec<usize>,
    pub budgets: Vec<u64>,
    pub runs: usize,
    pub folds: usize,
}

impl ClusterProtocol {
    pub fn paper() -> Self {
        ClusterProtocol {
            sizes: vec![1, 2, 4, 8, 16, 32, 64, 128, 256],
            budgets: vec![200, 200, 400, 800, 1000, 1500, 2000, 2500, 3000],
            runs: 10,
            folds: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.len() != self.budgets.len() {
            return Err(AdaptError::Config(format!("{} cluster sizes but {} budgets", self.sizes.len(), self.budgets.len())));
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) || self.sizes[0] == 0 {
            return Err(AdaptError::Config(format!("cluster sizes must be positive and increasing: {:?}", self.sizes)));
        }
        if let Some(&s) = self.sizes.iter().find(|&&s| s > TARGET_ADAPT_LINES) {
            return Err(AdaptError::Config(format!("cluster {s} exceeds the {TARGET_ADAPT_LINES} adaptation lines")));
        }
        if let Some(b) = self.budgets.iter().find(|&&b| b == 0 || b % EVAL_EVERY != 0) {
            return Err(AdaptError::Config(format!("budget {b} is not a positive multiple of {EVAL_EVERY}")));
        }
        if self.runs == 0 || self.folds < 2 {
            return Err(AdaptError::Config("need at least one run and two folds".into()));
        }
        for &s in self.sizes.iter().filter(|&&s| s >= MIN_CV_LINES) {
            if s % self.folds != 0 {
                return Err(AdaptError::Config(format!("{} folds do not divide cluster {s}", self.folds)));
            }
        }
        Ok(())
    }

    pub fn budget(&self, size: usize) -> Option<u64> {
        self.sizes.iter().position(|&s| s == size).map(|i| self.budgets[i])
    }

    /// The sub-protocol restricted to `sizes`, keeping their budgets.
    pub fn restricted(&self, sizes: &[usize]) -> Result<Self> {
        let budgets = sizes
            .iter()
            .map(|&s| self.budget(s).ok_or_else(|| AdaptError::Config(format!("no budget for cluster size {s}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClusterProtocol { sizes: sizes.to_vec(), budgets, ..self.clone() })
    }
}

/// How finetuning runs are trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSettings {
    /// Upper bound; smaller clusters use their own size.
    pub batch_size: usize,
    pub lr: f64,
    pub combo: Combo,
    #[serde(default)]
    pub ranges: AugmentRanges,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        FinetuneSettings { batch_size: 32, lr: 3e-4, combo: Combo::none(), ranges: AugmentRanges::default() }
    }
}

impl FinetuneSettings {
    pub fn batch_for(&self, cluster: usize) -> usize {
        self.batch_size.min(cluster).max(1)
    }

    fn options(&self, cluster: usize, iterations: u64, seed: u64) -> TrainOptions {
        TrainOptions {
            iterations,
            batch_size: self.batch_for(cluster),
            schedule: LrSchedule::Constant { lr: self.lr },
            combo: self.combo.clone(),
            ranges: self.ranges.clone(),
            seed,
        }
    }
}

/// A target writer's 256 test and 256 adaptation lines.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSplit {
    pub writer: u64,
    pub test: Vec<usize>,
    pub adaptation: Vec<usize>,
}

pub fn split_target_lines(data: &Dataset, writer: u64) -> Result<TargetSplit> {
    let test = data.indices(Split::Test, Some(writer));
    let adaptation = data.indices(Split::Adaptation, Some(writer));
    if test.len() < TARGET_TEST_LINES || adaptation.len() < TARGET_ADAPT_LINES {
        return Err(AdaptError::Protocol(format!(
            "writer {writer} has {} test and {} adaptation lines, need {TARGET_TEST_LINES} and {TARGET_ADAPT_LINES}",
            test.len(),
            adaptation.len()
        )));
    }
    Ok(TargetSplit { writer, test: test[..TARGET_TEST_LINES].to_vec(), adaptation: adaptation[..TARGET_ADAPT_LINES].to_vec() })
}

/// The nested clusters of one run.
pub fn run_clusters(split: &TargetSplit, protocol: &ClusterProtocol, run_seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run_seed, &[split.writer, 0xC1]));
    nested_clusters(&split.adaptation, &protocol.sizes, &mut rng)
}

/// Finetunes a fresh copy of `base` on `cluster` and records curves on `test`.
pub fn finetune_cluster(
    base: &Recognizer,
    data: &Dataset,
    cluster: &[usize],
    test: &[usize],
    budget: u64,
    settings: &FinetuneSettings,
    seed: u64,
    meta: CurveMeta,
) -> Result<(Recognizer, FinetuneCurves)> {
    let mut model = base.clone();
    let mut adam = Adam::new(model.params());
    let out = train(&mut model, &mut adam, data, cluster, test, &settings.options(cluster.len(), budget, seed))?;
    Ok((model, FinetuneCurves { meta, points: out.points }))
}

/// One finetuning run over every cluster of `protocol` for a target writer.
pub fn finetune_run(
    base: &Recognizer,
    data: &Dataset,
    split: &TargetSplit,
    protocol: &ClusterProtocol,
    settings: &FinetuneSettings,
    run: usize,
    run_seed: u64,
) -> Result<BTreeMap<usize, FinetuneCurves>> {
    protocol.validate()?;
    let clusters = run_clusters(split, protocol, run_seed);
    let results = clusters
        .par_iter()
        .zip(&protocol.budgets)
        .map(|(cluster, &budget)| {
            let meta = CurveMeta {
                kind: "finetune".into(),
                writer: Some(split.writer),
                cluster: Some(cluster.len()),
                run: Some(run),
                fold: None,
                combo: settings.combo.clone(),
                seed: run_seed,
                iterations: budget,
            };
            let seed = derive_seed(run_seed, &[split.writer, cluster.len() as u64, 0xF7]);
            finetune_cluster(base, data, cluster, &split.test, budget, settings, seed, meta).map(|(_, c)| (cluster.len(), c))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(results.into_iter().collect())
}

/// Deterministic partition of `lines` into `folds` equal parts.
pub fn fold_split(lines: &[usize], folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order = lines.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xF0])));
    let n = order.len();
    (0..folds).map(|k| order[k * n / folds..(k + 1) * n / folds].to_vec()).collect()
}

/// For each fold, finetunes on the other folds and records the held-out
/// fold's loss every 20 iterations.
pub fn kfold_curves(
    base: &Recognizer,
    data: &Dataset,
    adaptation_lines: &[usize],
    folds: usize,
    budget: u64,
    settings: &FinetuneSettings,
    seed: u64,
    meta: &CurveMeta,
) -> Result<Vec<FinetuneCurves>> {
    if adaptation_lines.len() < MIN_CV_LINES {
        return Err(AdaptError::Protocol(format!(
            "cross-validation on less than {MIN_CV_LINES} lines is not reliable (got {})",
            adaptation_lines.len()
        )));
    }
    if folds < 2 || adaptation_lines.len() % folds != 0 {
        return Err(AdaptError::Config(format!("{folds} folds do not divide {} lines", adaptation_lines.len())));
    }
    let parts = fold_split(adaptation_lines, folds, seed);
    parts
        .par_iter()
        .enumerate()
        .map(|(k, held_out)| {
            let train_lines: Vec<usize> = parts.iter().enumerate().filter(|&(j, _)| j != k).flat_map(|(_, p)| p.iter().copied()).collect();
            let meta = CurveMeta { kind: "fold".into(), fold: Some(k), iterations: budget, ..meta.clone() };
            let seed = derive_seed(seed, &[k as u64, 0xF1]);
            finetune_cluster(base, data, &train_lines, held_out, budget, settings, seed, meta).map(|(_, c)| c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::fixtures;
    use crate::recognizer::RecognizerConfig;

    #[test]
    fn paper_protocol_is_consistent() {
        let p = ClusterProtocol::paper();
        p.validate().unwrap();
        assert_eq!(p.budget(64), Some(2000));
        assert_eq!(p.budget(64).unwrap() / EVAL_EVERY, 100);
        assert_eq!(p.restricted(&[16, 256]).unwrap().budgets, vec![1000, 3000]);
        assert!(p.restricted(&[3]).is_err());
        let bad = ClusterProtocol { budgets: vec![30], sizes: vec![16], runs: 1, folds: 4 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn finetune_batch_is_capped_by_cluster() {
        let s = FinetuneSettings::default();
        assert_eq!((s.batch_for(1), s.batch_for(16), s.batch_for(256)), (1, 16, 32));
    }

    #[test]
    fn folds_partition_deterministically() {
        let lines: Vec<usize> = (0..16).collect();
        let f = fold_split(&lines, 4, 9);
        assert!(f.iter().all(|p| p.len() == 4));
        let mut all: Vec<usize> = f.concat();
        all.sort();
        assert_eq!(all, lines);
        assert_eq!(f, fold_split(&lines, 4, 9));
        assert_ne!(f, fold_split(&lines, 4, 10));
    }

    #[test]
    fn small_clusters_are_refused_for_cross_validation() {
        let (_d, data) = fixtures::dataset(0);
        let base = Recognizer::build(RecognizerConfig::desk(), 1).unwrap();
        let meta = CurveMeta::base(Combo::none(), 0, 20);
        let lines: Vec<usize> = (0..8).collect();
        let err = kfold_curves(&base, &data, &lines, 4, 20, &FinetuneSettings::default(), 1, &meta).unwrap_err();
        assert!(err.to_string().contains("cross-validation on less than 16 lines is not reliable"));
    }

    #[test]
    fn finetune_run_records_curves_per_cluster() {
        let (_d, data) = fixtures::dataset(1);
        let writer = data.target_writers()[0];
        let split = split_target_lines(&data, writer).unwrap();
        assert_eq!((split.test.len(), split.adaptation.len()), (256, 256));
        let base = Recognizer::build(RecognizerConfig::desk(), 1).unwrap();
        let protocol = ClusterProtocol { sizes: vec![1, 2], budgets: vec![20, 40], runs: 1, folds: 4 };
        let settings = FinetuneSettings { batch_size: 2, ..Default::default() };
        let curves = finetune_run(&base, &data, &split, &protocol, &settings, 0, 3).unwrap();
        assert_eq!(curves[&1].points.len(), 1);
        assert_eq!(curves[&2].points.len(), 2);
        assert_eq!(curves[&2].meta.writer, Some(writer));
        let clusters = run_clusters(&split, &protocol, 3);
        assert!(clusters[1].contains(&clusters[0][0]));
        assert!(split_target_lines(&data, 0).is_err());
    }
}
