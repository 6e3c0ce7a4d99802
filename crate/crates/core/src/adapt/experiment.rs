//! End-to-end desk experiment: synthetic data, base training, finetuning to
//! held-out target writers over line clusters, stopping-iteration estimation
//! and relative CER reduction summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::curves::{CurveMeta, FinetuneCurves};
use super::estimate::{estimate_stop, snap_to_grid, EstimatorSpec, RatioTable, StopEstimate, StopInputs, Strategy};
use super::protocol::{finetune_cluster, kfold_curves, run_clusters, split_target_lines, ClusterProtocol, FinetuneSettings, TargetSplit};
use super::schedule::{LrSchedule, WarmupSchedule, PAPER_TRAINING_ITERATIONS};
use super::train::{evaluate, train, TrainOptions};
use super::{derive_seed, AdaptError, Result};
use crate::augment::{AugmentRanges, Combo};
use crate::dataset::{build_dataset, Dataset, DatasetSpec, Manifest, Split, MANIFEST_FILE};
use crate::eval::{aggregate, relative_reduction, WriterStats};
use crate::numerics::Adam;
use crate::recognizer::{Checkpoint, Recognizer, RecognizerConfig};

/// Base model training recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseTraining {
    pub model: String,
    pub iterations: u64,
    pub batch_size: usize,
    pub combo: Combo,
    /// Multiplies every maximum of the scaled warmup schedule.
    pub lr_scale: f64,
    /// Base-writer test lines used for the training curves.
    pub eval_lines: usize,
    pub seed: u64,
}

impl BaseTraining {
    pub fn model_config(&self) -> Result<RecognizerConfig> {
        RecognizerConfig::preset(&self.model).ok_or_else(|| AdaptError::Config(format!("unknown model preset {:?}", self.model)))
    }

    pub fn schedule(&self) -> WarmupSchedule {
        let mut s = WarmupSchedule::paper().scaled(PAPER_TRAINING_ITERATIONS, self.iterations);
        for seg in &mut s.segments {
            seg.lr_max *= self.lr_scale;
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSpec {
    pub batch_size: usize,
    pub lr: f64,
    pub combos: Vec<Combo>,
    pub estimator: EstimatorSpec,
    /// Number of target writers to use (all when larger than available).
    pub writers: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub base: BaseTraining,
    pub protocol: ClusterProtocol,
    pub finetune: FinetuneSpec,
}

impl ExperimentConfig {
    /// 20 base writers, 5 high-divergence targets, clusters 16/64/256, 3 runs,
    /// X with factor 1.5, NONE against B1C1G1M1.
    pub fn desk() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::desk(),
            base: BaseTraining {
                model: "desk".into(),
                iterations: 12_000,
                batch_size: 8,
                combo: Combo::parse("B1C1G1M1").expect("registered"),
                lr_scale: 10.0 / 3.0,
                eval_lines: 60,
                seed: 1,
            },
            protocol: ClusterProtocol { sizes: vec![16, 64, 256], budgets: vec![200, 500, 500], runs: 3, folds: 4 },
            finetune: FinetuneSpec {
                batch_size: 4,
                lr: 1e-3,
                combos: vec![Combo::none(), Combo::parse("B1C1G1M1").expect("registered")],
                estimator: EstimatorSpec::new(Strategy::X, 1.5).expect("valid"),
                writers: 5,
                seed: 11,
            },
        }
    }

    /// Reduced variant: shorter base training, two target writers, the
    /// 64-line cluster only, one run, B1C1G1M1 only.
    pub fn desk_tiny() -> Self {
        let mut c = Self::desk();
        c.base.iterations = 6_000;
        c.protocol = ClusterProtocol { sizes: vec![64], budgets: vec![500], runs: 1, folds: 4 };
        c.finetune.combos = vec![Combo::parse("B1C1G1M1").expect("registered")];
        c.finetune.writers = 2;
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "desk-tiny" => Some(Self::desk_tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.model_config()?;
        self.base.schedule().validate()?;
        self.protocol.validate()?;
        self.finetune.estimator.validate()?;
        if self.finetune.combos.is_empty() {
            return Err(AdaptError::Config("no augmentation combos to finetune with".into()));
        }
        if self.finetune.estimator.strategy.needs_folds() {
            if let Some(s) = self.protocol.sizes.iter().find(|&&s| s < super::MIN_CV_LINES) {
                return Err(AdaptError::Protocol(format!(
                    "estimator {} cross-validates, and cross-validation on less than {} lines is not reliable (cluster {s})",
                    self.finetune.estimator.strategy,
                    super::MIN_CV_LINES
                )));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

fn hash_json<T: Serialize>(v: &T) -> String {
    let json = serde_json::to_vec(v).expect("serializable");
    hex::encode(Sha256::digest(json))
}

/// One (writer, combo, run, cluster) outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub writer: u64,
    pub combo: Combo,
    pub run: usize,
    pub cluster: usize,
    pub baseline_cer: f64,
    pub estimate: StopEstimate,
    pub finetuned_cer: f64,
    pub reduction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub combo: Combo,
    pub cluster: usize,
    pub stats: WriterStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub base_test_cer: f64,
    pub records: Vec<ExperimentRecord>,
    pub summary: Vec<SummaryRow>,
    pub seconds: f64,
}

impl ExperimentReport {
    pub fn mean_reduction(&self, combo: &Combo, cluster: usize) -> Option<f64> {
        self.summary.iter().find(|r| &r.combo == combo && r.cluster == cluster).map(|r| r.stats.mean)
    }
}

/// Summaries per (combo, cluster), combos in registry order.
pub fn summarize(records: &[ExperimentRecord]) -> Result<Vec<SummaryRow>> {
    let mut groups: BTreeMap<(Option<usize>, String, usize), (Combo, BTreeMap<u64, Vec<f64>>)> = BTreeMap::new();
    for r in records {
        let key = (r.combo.registry_index(), r.combo.to_string(), r.cluster);
        let entry = groups.entry(key).or_insert_with(|| (r.combo.clone(), BTreeMap::new()));
        entry.1.entry(r.writer).or_default().push(r.reduction);
    }
    groups
        .into_iter()
        .map(|((_, _, cluster), (combo, by_writer))| Ok(SummaryRow { combo, cluster, stats: aggregate(&by_writer)? }))
        .collect()
}

/// Reuses `dir` when it already holds a dataset generated from `spec`.
pub fn ensure_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST_FILE);
    let reusable = manifest.exists() && Manifest::read(&manifest).map(|m| &m.header.spec == spec).unwrap_or(false);
    if !reusable {
        info!("generating dataset in {}", dir.display());
        build_dataset(spec, dir)?;
    }
    Ok(Dataset::load(dir)?)
}

/// Base-writer test lines, spread across writers, for base training curves.
pub fn base_eval_lines(data: &Dataset, count: usize) -> Vec<usize> {
    let targets = data.target_writers();
    let mut per_writer: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for i in data.indices(Split::Test, None) {
        let w = data.manifest.records[i].writer;
        if !targets.contains(&w) {
            per_writer.entry(w).or_default().push(i);
        }
    }
    let mut out = Vec::new();
    let mut depth = 0;
    while out.len() < count && per_writer.values().any(|v| v.len() > depth) {
        out.extend(per_writer.values().filter_map(|v| v.get(depth)).copied());
        depth += 1;
    }
    out.truncate(count);
    out
}

/// Trains the base model on every base writer's training lines.
pub fn train_base(base: &BaseTraining, data: &Dataset) -> Result<(Recognizer, FinetuneCurves)> {
    let mut model = Recognizer::build(base.model_config()?, base.seed)?;
    let mut adam = Adam::new(model.params());
    let pool = data.indices(Split::Train, None);
    let eval = base_eval_lines(data, base.eval_lines);
    let opts = TrainOptions {
        iterations: base.iterations,
        batch_size: base.batch_size,
        schedule: LrSchedule::Warmup(base.schedule()),
        combo: base.combo.clone(),
        ranges: AugmentRanges::default(),
        seed: base.seed,
    };
    let out = train(&mut model, &mut adam, data, &pool, &eval, &opts)?;
    let curves = FinetuneCurves { meta: CurveMeta::base(base.combo.clone(), base.seed, base.iterations), points: out.points };
    Ok((model, curves))
}

/// Loads the base checkpoint cached under `dir` for this recipe and
/// dataset, or trains and caches it.
pub fn ensure_base(base: &BaseTraining, spec: &DatasetSpec, data: &Dataset, dir: &Path) -> Result<Recognizer> {
    let key = hash_json(&(base, spec));
    let ckpt = dir.join(format!("base-{}.ckpt", &key[..16]));
    if ckpt.exists() {
        info!("reusing base model {}", ckpt.display());
        return Ok(Checkpoint::load_expecting(&ckpt, &base.model_config()?)?.model);
    }
    let t = Instant::now();
    let (model, curves) = train_base(base, data)?;
    info!("trained base model in {:.0} s", t.elapsed().as_secs_f64());
    fs::create_dir_all(dir)?;
    curves.save(&dir.join(format!("base-{}.curves.jsonl", &key[..16])))?;
    let mut c = Checkpoint::new(model.clone());
    c.iteration = base.iterations;
    c.rng_seed = base.seed;
    c.save(&ckpt)?;
    Ok(model)
}

struct Job<'a> {
    split: &'a TargetSplit,
    combo: &'a Combo,
    run: usize,
    cluster: Vec<usize>,
    budget: u64,
}

/// Curves of one finetuning of one cluster, with its fold curves when the
/// estimator cross-validates.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterRun {
    pub writer: u64,
    pub combo: Combo,
    pub run: usize,
    pub cluster: usize,
    pub budget: u64,
    pub curves: FinetuneCurves,
    pub folds: Vec<FinetuneCurves>,
}

/// What [`finetune_writers`] runs.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetunePlan {
    pub protocol: ClusterProtocol,
    pub combos: Vec<Combo>,
    pub batch_size: usize,
    pub lr: f64,
    pub with_folds: bool,
    pub seed: u64,
}

/// Finetunes `base` for every writer, run, combo and cluster. Clusters depend
/// on writer and run only, so combos are compared on the same lines. Curves
/// are saved under `curve_dir` when given.
pub fn finetune_writers(
    base: &Recognizer,
    data: &Dataset,
    splits: &[TargetSplit],
    plan: &FinetunePlan,
    curve_dir: Option<&Path>,
) -> Result<Vec<ClusterRun>> {
    plan.protocol.validate()?;
    let mut jobs = Vec::new();
    for split in splits {
        for run in 0..plan.protocol.runs {
            let run_seed = derive_seed(plan.seed, &[run as u64]);
            let clusters = run_clusters(split, &plan.protocol, run_seed);
            for combo in &plan.combos {
                for (cluster, &budget) in clusters.iter().zip(&plan.protocol.budgets) {
                    jobs.push(Job { split, combo, run, cluster: cluster.clone(), budget });
                }
            }
        }
    }
    if let Some(dir) = curve_dir {
        fs::create_dir_all(dir)?;
    }
    let total = jobs.len();
    jobs.par_iter()
        .enumerate()
        .map(|(j, job)| {
            let t = Instant::now();
            let settings = FinetuneSettings {
                batch_size: plan.batch_size,
                lr: plan.lr,
                combo: job.combo.clone(),
                ranges: AugmentRanges::default(),
            };
            let writer = job.split.writer;
            let size = job.cluster.len();
            let seed = derive_seed(plan.seed, &[writer, job.run as u64, size as u64]);
            let meta = CurveMeta {
                kind: "finetune".into(),
                writer: Some(writer),
                cluster: Some(size),
                run: Some(job.run),
                fold: None,
                combo: job.combo.clone(),
                seed,
                iterations: job.budget,
            };
            let (_, curves) = finetune_cluster(base, data, &job.cluster, &job.split.test, job.budget, &settings, seed, meta.clone())?;
            let folds = if plan.with_folds {
                kfold_curves(base, data, &job.cluster, plan.protocol.folds, job.budget, &settings, seed, &meta)?
            } else {
                Vec::new()
            };
            let stem = format!("{}-w{writer:03}-r{}-c{size:03}", job.combo, job.run);
            if let Some(dir) = curve_dir {
                curves.save(&dir.join(format!("{stem}.jsonl")))?;
                for (k, f) in folds.iter().enumerate() {
                    f.save(&dir.join(format!("{stem}-f{k}.jsonl")))?;
                }
            }
            info!("job {}/{total} ({stem}) done in {:.0} s", j + 1, t.elapsed().as_secs_f64());
            Ok(ClusterRun { writer, combo: job.combo.clone(), run: job.run, cluster: size, budget: job.budget, curves, folds })
        })
        .collect()
}

/// Test CER of `base` on each split's test lines.
pub fn baselines(base: &Recognizer, data: &Dataset, splits: &[TargetSplit]) -> Result<BTreeMap<u64, f64>> {
    splits.par_iter().map(|s| Ok((s.writer, evaluate(base, data, &s.test)?.cer))).collect()
}

/// Runs the whole experiment with artifacts under `work_dir`.
///
/// The dataset and the base model are cached there and reused when the
/// relevant parts of the configuration are unchanged.
pub fn run_experiment(cfg: &ExperimentConfig, work_dir: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    fs::create_dir_all(work_dir)?;
    let data = ensure_dataset(&cfg.dataset, &work_dir.join("data"))?;
    let base = ensure_base(&cfg.base, &cfg.dataset, &data, work_dir)?;

    let writers: Vec<u64> = data.target_writers().into_iter().take(cfg.finetune.writers).collect();
    if writers.is_empty() {
        return Err(AdaptError::Protocol("dataset has no target writers".into()));
    }
    let splits = writers.iter().map(|&w| split_target_lines(&data, w)).collect::<Result<Vec<_>>>()?;
    let baselines = baselines(&base, &data, &splits)?;
    let base_test_cer = baselines.values().sum::<f64>() / baselines.len() as f64;
    info!("base model test CER on target writers: {base_test_cer:.4}");

    let plan = FinetunePlan {
        protocol: cfg.protocol.clone(),
        combos: cfg.finetune.combos.clone(),
        batch_size: cfg.finetune.batch_size,
        lr: cfg.finetune.lr,
        with_folds: cfg.finetune.estimator.strategy.needs_folds(),
        seed: cfg.finetune.seed,
    };
    let runs = finetune_writers(&base, &data, &splits, &plan, Some(&work_dir.join("curves")))?;
    let records = estimate_records(&runs, &cfg.finetune.estimator, &baselines, None)?;
    let summary = summarize(&records)?;
    let report = ExperimentReport {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        base_test_cer,
        records,
        summary,
        seconds: start.elapsed().as_secs_f64(),
    };
    fs::write(report_path(work_dir), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Stopping iteration, finetuned CER and reduction of every run.
///
/// With a ratio table, S estimates come from the table instead of other
/// writers' curves; the CER is read at the nearest recorded iteration.
pub fn estimate_records(
    runs: &[ClusterRun],
    spec: &EstimatorSpec,
    baselines: &BTreeMap<u64, f64>,
    ratios: Option<&RatioTable>,
) -> Result<Vec<ExperimentRecord>> {
    // Test-loss curves per (combo, cluster) and writer, for S.
    let mut pooled: BTreeMap<(String, usize), BTreeMap<u64, Vec<Vec<f64>>>> = BTreeMap::new();
    for r in runs {
        pooled.entry((r.combo.to_string(), r.cluster)).or_default().entry(r.writer).or_default().push(r.curves.test_loss());
    }
    runs.iter()
        .map(|r| {
            let estimate = match (spec.strategy, ratios) {
                (Strategy::S, Some(table)) => {
                    let raw = table
                        .iterations(r.cluster, r.budget)
                        .ok_or_else(|| AdaptError::Estimator(format!("ratio table has no entry for cluster {}", r.cluster)))?;
                    StopEstimate { spec: *spec, raw, iteration: snap_to_grid(raw as f64, r.budget) }
                }
                _ => {
                    let cer = r.curves.test_cer();
                    let folds: Vec<Vec<f64>> = r.folds.iter().map(FinetuneCurves::test_loss).collect();
                    let inputs = StopInputs {
                        budget: r.budget,
                        test_cer: Some(&cer),
                        fold_losses: (!folds.is_empty()).then_some(folds.as_slice()),
                        writer_losses: pooled.get(&(r.combo.to_string(), r.cluster)),
                        held_out_writer: Some(r.writer),
                    };
                    estimate_stop(spec, &inputs)?
                }
            };
            let finetuned_cer = r
                .curves
                .cer_at(estimate.iteration)
                .ok_or_else(|| AdaptError::Curves(format!("no curve point at iteration {}", estimate.iteration)))?;
            let baseline_cer = *baselines
                .get(&r.writer)
                .ok_or_else(|| AdaptError::Protocol(format!("no baseline CER for writer {}", r.writer)))?;
            Ok(ExperimentRecord {
                writer: r.writer,
                combo: r.combo.clone(),
                run: r.run,
                cluster: r.cluster,
                baseline_cer,
                estimate,
                finetuned_cer,
                reduction: relative_reduction(baseline_cer, finetuned_cer)?,
            })
        })
        .collect()
}

/// Loads a report written by [`run_experiment`].
pub fn load_report(path: &Path) -> Result<ExperimentReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Default location of the report inside a work directory.
pub fn report_path(work_dir: &Path) -> PathBuf {
    work_dir.join("report.json")
}
