//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ctc_adapt::adapt::experiment::{
    baselines, ensure_dataset, estimate_records, finetune_writers, run_experiment, summarize, train_base as fit_base, ExperimentConfig,
    FinetunePlan,
};
use ctc_adapt::adapt::{
    estimate_stop as estimate, evaluate as eval_lines, split_target_lines, snap_to_grid, ClusterProtocol, EstimatorSpec, FinetuneCurves,
    RatioTable, StopEstimate, StopInputs, Strategy, MIN_CV_LINES,
};
use ctc_adapt::augment::Combo;
use ctc_adapt::dataset::{build_dataset, Dataset, DatasetSpec, Split, TextSource};
use ctc_adapt::eval::CerReport;
use ctc_adapt::recognizer::{Checkpoint, Recognizer};
use log::info;
use serde::Serialize;

use crate::config::{content_dir, file_hash, load_config, render_config};
use crate::report::{build_plots, collect, summary_table, PLOT_KINDS};
use crate::{plot, EstimateStopArgs, EvaluateArgs, ExperimentArgs, FinetuneArgs, GenDataArgs, ReportArgs, ShowConfigArgs, TrainBaseArgs, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn combo(name: &str) -> Result<Combo> {
    Combo::parse(name).map_err(|e| usage(format!("--aug {name}: {e}")))
}

fn estimator(name: &str, factor: f64) -> Result<EstimatorSpec> {
    let strategy: Strategy = name.parse().map_err(|e| usage(format!("--estimator {name}: {e}")))?;
    EstimatorSpec::new(strategy, factor).map_err(|e| usage(format!("{e}")))
}

fn ratio_table(name: Option<&str>, strategy: Strategy) -> Result<Option<RatioTable>> {
    let Some(name) = name else { return Ok(None) };
    if strategy != Strategy::S {
        return Err(usage("--ratio-preset only applies to estimator S"));
    }
    match RatioTable::preset(name) {
        Some(t) => Ok(Some(t)),
        None => Err(usage(format!("unknown ratio preset {name:?}; expected paper-S3"))),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut spec = DatasetSpec::desk();
    spec.seed = a.seed;
    spec.base_writers = a.writers;
    spec.base_train_lines = a.lines_per_writer;
    spec.base_test_lines = a.test_lines;
    spec.base_divergence = (0.0, a.divergence);
    spec.target_writers = a.targets;
    spec.target_divergence = a.target_divergence;
    if let Some(p) = &a.corpus {
        spec.text = TextSource::Corpus { path: p.clone() };
    }
    let manifest = build_dataset(&spec, &a.out)?;
    println!("{} records in {}", manifest.records.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct BaseSummary<'a> {
    checkpoint: &'a str,
    curves: &'a str,
    iterations: u64,
    final_test_cer: Option<f64>,
}

pub fn train_base(a: &TrainBaseArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), &a.preset).map_err(|e| usage(format!("{e:#}")))?;
    if let Some(n) = a.iters {
        cfg.base.iterations = n;
    }
    if let Some(name) = &a.aug {
        cfg.base.combo = combo(name)?;
    }
    if let Some(s) = a.seed {
        cfg.base.seed = s;
    }
    cfg.base.model_config().map_err(|e| usage(e.to_string()))?;
    let data = match &a.data {
        Some(p) => Dataset::load(p)?,
        None => ensure_dataset(&cfg.dataset, &content_dir(&a.out, "data", &cfg.dataset)?)?,
    };
    let data_hash = file_hash(&data.root.join(ctc_adapt::dataset::MANIFEST_FILE))?;
    let dir = content_dir(&a.out, "base", &(&cfg.base, &data_hash))?;
    info!("training base model into {}", dir.display());
    let (model, curves) = fit_base(&cfg.base, &data)?;
    let mut ckpt = Checkpoint::new(model);
    ckpt.iteration = cfg.base.iterations;
    ckpt.rng_seed = cfg.base.seed;
    ckpt.save(&dir.join("base.ckpt"))?;
    curves.save(&dir.join("curves.jsonl"))?;
    fs::write(dir.join("config.toml"), render_config(&cfg)?)?;
    let summary = BaseSummary {
        checkpoint: "base.ckpt",
        curves: "curves.jsonl",
        iterations: cfg.base.iterations,
        final_test_cer: curves.points.last().map(|p| p.test_cer),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!("{}", dir.display());
    Ok(())
}

/// Everything that determines a finetune output, hashed into its directory name.
#[derive(Serialize)]
struct FinetuneJob {
    checkpoint: String,
    manifest: String,
    writers: Vec<u64>,
    protocol: ClusterProtocol,
    combos: Vec<Combo>,
    estimator: EstimatorSpec,
    ratio_preset: Option<String>,
    batch_size: usize,
    lr: f64,
    seed: u64,
}

#[derive(Serialize)]
struct FinetuneResults<'a> {
    job: &'a FinetuneJob,
    baselines: &'a BTreeMap<u64, f64>,
    records: &'a [ctc_adapt::adapt::experiment::ExperimentRecord],
    summary: &'a [ctc_adapt::adapt::experiment::SummaryRow],
}

pub fn finetune(a: &FinetuneArgs) -> Result<()> {
    let spec = estimator(&a.estimator, a.factor)?;
    let ratios = ratio_table(a.ratio_preset.as_deref(), spec.strategy)?;
    let combos = a.aug.iter().map(|n| combo(n)).collect::<Result<Vec<_>>>()?;
    let mut sizes = a.clusters.clone();
    sizes.sort_unstable();
    sizes.dedup();
    if spec.strategy.needs_folds() {
        if let Some(s) = sizes.iter().find(|&&s| s < MIN_CV_LINES) {
            return Err(usage(format!(
                "estimator {} cross-validates, and cross-validation on less than {MIN_CV_LINES} lines is not reliable (cluster {s})",
                spec.strategy
            )));
        }
    }
    let protocol = if a.budgets.is_empty() {
        ClusterProtocol::paper().restricted(&sizes).map_err(|e| usage(format!("{e}; pass --budgets")))?
    } else if a.budgets.len() != a.clusters.len() {
        return Err(usage(format!("{} clusters but {} budgets", a.clusters.len(), a.budgets.len())));
    } else {
        let mut pairs: Vec<(usize, u64)> = a.clusters.iter().copied().zip(a.budgets.iter().copied()).collect();
        pairs.sort_unstable();
        pairs.dedup_by_key(|p| p.0);
        ClusterProtocol { sizes: pairs.iter().map(|p| p.0).collect(), budgets: pairs.iter().map(|p| p.1).collect(), runs: 3, folds: 4 }
    };
    let protocol = ClusterProtocol { runs: a.runs, folds: a.folds, ..protocol };
    protocol.validate().map_err(|e| usage(e.to_string()))?;

    let base = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?.model;
    let data = Dataset::load(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let targets = data.target_writers();
    let mut writers = if a.writer.is_empty() { targets.clone() } else { a.writer.clone() };
    writers.sort_unstable();
    writers.dedup();
    if writers.is_empty() {
        bail!("dataset has no target writers");
    }
    if let Some(w) = writers.iter().find(|w| !targets.contains(w)) {
        return Err(usage(format!("writer {w} is not a target writer of this dataset")));
    }
    if spec.strategy == Strategy::S && ratios.is_none() && writers.len() < 2 {
        return Err(usage("estimator S without a ratio table needs at least two writers"));
    }

    let job = FinetuneJob {
        checkpoint: file_hash(&a.checkpoint)?,
        manifest: file_hash(&data.root.join(ctc_adapt::dataset::MANIFEST_FILE))?,
        writers: writers.clone(),
        protocol: protocol.clone(),
        combos: combos.clone(),
        estimator: spec,
        ratio_preset: a.ratio_preset.clone(),
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
    };
    let dir = content_dir(&a.out, "finetune", &job)?;
    info!("finetuning into {}", dir.display());
    let splits = writers.iter().map(|&w| split_target_lines(&data, w)).collect::<Result<Vec<_>, _>>()?;
    let baseline = baselines(&base, &data, &splits)?;
    let plan = FinetunePlan {
        protocol,
        combos,
        batch_size: a.batch_size,
        lr: a.lr,
        with_folds: spec.strategy.needs_folds(),
        seed: a.seed,
    };
    let runs = finetune_writers(&base, &data, &splits, &plan, Some(&dir.join("curves")))?;
    let records = estimate_records(&runs, &spec, &baseline, ratios.as_ref())?;
    let summary = summarize(&records)?;
    write_json(&dir.join("results.json"), &FinetuneResults { job: &job, baselines: &baseline, records: &records, summary: &summary })?;
    print!("{}", summary_table(&summary));
    println!("{}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EstimateOutput {
    estimate: StopEstimate,
    test_cer: Option<f64>,
}

fn load_curves(path: &Path) -> Result<FinetuneCurves> {
    FinetuneCurves::load(path).with_context(|| format!("loading curves {}", path.display()))
}

pub fn estimate_stop(a: &EstimateStopArgs) -> Result<()> {
    let spec = estimator(&a.estimator, a.factor)?;
    let ratios = ratio_table(a.ratio_preset.as_deref(), spec.strategy)?;
    let main = a.curves.as_deref().map(load_curves).transpose()?;
    let folds = a.folds.iter().map(|p| load_curves(p)).collect::<Result<Vec<_>>>()?;
    let others = a.writer_curves.iter().map(|p| load_curves(p)).collect::<Result<Vec<_>>>()?;
    let meta = main.as_ref().or(folds.first()).map(|c| c.meta.clone());
    let budget = match (a.budget, &meta) {
        (Some(b), _) => b,
        (None, Some(m)) => m.iterations,
        (None, None) => return Err(usage("need --budget when no curves are given")),
    };
    let writer = a.writer.or(meta.as_ref().and_then(|m| m.writer));

    let estimate = if let Some(table) = &ratios {
        let size = a.cluster.or(meta.as_ref().and_then(|m| m.cluster)).ok_or_else(|| usage("need --cluster with a ratio table"))?;
        let raw = table.iterations(size, budget).ok_or_else(|| usage(format!("ratio table has no entry for cluster {size}")))?;
        StopEstimate { spec, raw, iteration: snap_to_grid(raw as f64, budget) }
    } else {
        let cer = main.as_ref().map(FinetuneCurves::test_cer);
        let fold_losses: Vec<Vec<f64>> = folds.iter().map(FinetuneCurves::test_loss).collect();
        let mut by_writer: BTreeMap<u64, Vec<Vec<f64>>> = BTreeMap::new();
        for c in &others {
            let w = c.meta.writer.ok_or_else(|| usage("writer curves must name their writer"))?;
            by_writer.entry(w).or_default().push(c.test_loss());
        }
        let inputs = StopInputs {
            budget,
            test_cer: cer.as_deref(),
            fold_losses: (!fold_losses.is_empty()).then_some(fold_losses.as_slice()),
            writer_losses: (!by_writer.is_empty()).then_some(&by_writer),
            held_out_writer: writer,
        };
        estimate(&spec, &inputs).map_err(|e| usage(e.to_string()))?
    };
    let out = EstimateOutput { test_cer: main.as_ref().and_then(|c| c.cer_at(estimate.iteration)), estimate };
    let text = serde_json::to_string_pretty(&out)?;
    match &a.out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluateOutput {
    split: Split,
    writer: Option<u64>,
    lines: usize,
    loss: f64,
    report: CerReport,
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let split: Split = serde_json::from_value(serde_json::Value::String(a.split.clone()))
        .map_err(|_| usage(format!("--split must be train, test or adaptation, got {:?}", a.split)))?;
    let model: Recognizer = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?.model;
    let data = Dataset::load(&a.data)?;
    let lines = data.indices(split, a.writer);
    if lines.is_empty() {
        bail!("no {} lines{}", a.split, a.writer.map(|w| format!(" for writer {w}")).unwrap_or_default());
    }
    let ev = eval_lines(&model, &data, &lines)?;
    let refs: Vec<&str> = lines.iter().map(|&i| data.text(i)).collect();
    let report = CerReport::new(&refs, &ev.hypotheses)?;
    println!("lines {}  loss {:.4}  CER {:.4}", lines.len(), ev.loss, report.cer);
    if let Some(p) = &a.out {
        write_json(p, &EvaluateOutput { split, writer: a.writer, lines: lines.len(), loss: ev.loss, report })?;
    }
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    if let Some(k) = a.plot.iter().find(|k| !PLOT_KINDS.contains(&k.as_str())) {
        return Err(usage(format!("unknown plot kind {k:?}; expected one of {}", PLOT_KINDS.join(", "))));
    }
    if !a.input.is_dir() {
        return Err(usage(format!("{} is not a directory", a.input.display())));
    }
    let found = collect(&a.input)?;
    if found.records.is_empty() {
        bail!("no runs found in {}", a.input.display());
    }
    fs::create_dir_all(&a.out)?;
    let rows = summarize(&found.records)?;
    let table = summary_table(&rows);
    fs::write(a.out.join("summary.txt"), &table)?;
    write_json(&a.out.join("summary.json"), &rows)?;
    for (stem, p) in build_plots(&found.records, &found.curves, &a.plot)? {
        plot::write_plot(&p, &a.out, &stem)?;
    }
    print!("{table}");
    Ok(())
}

pub fn experiment(a: &ExperimentArgs) -> Result<()> {
    let preset = if a.tiny { "desk-tiny" } else { "desk" };
    let cfg: ExperimentConfig = load_config(a.config.as_deref(), preset).map_err(|e| usage(format!("{e:#}")))?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let dir = content_dir(&a.out, "experiment", &cfg)?;
    fs::write(dir.join("config.toml"), render_config(&cfg)?)?;
    info!("experiment directory {}", dir.display());
    let report = run_experiment(&cfg, &dir)?;
    print!("{}", summary_table(&report.summary));
    println!("base test CER {:.4}, {:.0} s", report.base_test_cer, report.seconds);
    println!("{}", dir.display());
    Ok(())
}

pub fn show_config(a: &ShowConfigArgs) -> Result<()> {
    let cfg = load_config(None, &a.preset).map_err(|e| usage(format!("{e:#}")))?;
    print!("{}", render_config(&cfg)?);
    Ok(())
}
