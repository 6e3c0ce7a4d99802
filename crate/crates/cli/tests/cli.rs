use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctc_adapt::adapt::experiment::{ExperimentConfig, ExperimentRecord};
use ctc_adapt::adapt::{EstimatorSpec, FinetuneCurves, StopEstimate, Strategy};
use ctc_adapt::augment::Combo;
use ctc_adapt::dataset::Manifest;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ctc-adapt"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn only_subdir(dir: &Path, prefix: &str) -> PathBuf {
    let found: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with(prefix))
        .collect();
    assert_eq!(found.len(), 1, "{found:?}");
    found[0].clone()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_data_counts_and_repeats() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["gen-data", "--writers", "20", "--lines-per-writer", "200", "--seed", "1", "--out", d.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let m = Manifest::read(&a.join("manifest.jsonl")).unwrap();
    assert_eq!(m.records.len(), 4000);
    assert_eq!(files(&a), files(&b));
}

#[test]
fn usage_errors_exit_2() {
    let o = run(&["gen-data", "--writers", "2"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--out"));
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["finetune", "--checkpoint", "x", "--data", "y", "--out", "z", "--aug", "Q9"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn workers_env_is_validated() {
    let o = bin().env("CTC_ADAPT_WORKERS", "zero").args(["show-config"]).output().unwrap();
    assert_eq!(code(&o), 2);
    let o = bin().env("CTC_ADAPT_WORKERS", "2").args(["show-config"]).output().unwrap();
    assert_eq!(code(&o), 0);
}

#[test]
fn cross_validation_needs_sixteen_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = run(&["finetune", "--checkpoint", "missing.ckpt", "--data", "missing", "--clusters", "8", "--estimator", "A", "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("less than 16 lines is not reliable"), "{}", stderr(&o));
    // Accepted clusters get as far as loading the checkpoint, which fails at runtime.
    let o = run(&["finetune", "--checkpoint", "missing.ckpt", "--data", "missing", "--clusters", "16", "--estimator", "A", "--out", out]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn show_config_round_trips() {
    let o = run(&["show-config", "--preset", "desk"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let parsed: ExperimentConfig = toml::from_str(&text).unwrap();
    assert_eq!(parsed, ExperimentConfig::desk());
    assert_eq!(toml::to_string_pretty(&parsed).unwrap(), text);
    assert_eq!(code(&run(&["show-config", "--preset", "nope"])), 2);
}

#[test]
fn report_on_empty_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    fs::create_dir(&input).unwrap();
    let o = run(&["report", "--in", input.to_str().unwrap(), "--out", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no runs found"));
}

fn record(writer: u64, combo: &str, cluster: usize, reduction: f64) -> ExperimentRecord {
    ExperimentRecord {
        writer,
        combo: Combo::parse(combo).unwrap(),
        run: 0,
        cluster,
        baseline_cer: 0.4,
        estimate: StopEstimate { spec: EstimatorSpec::new(Strategy::X, 1.5).unwrap(), raw: 100, iteration: 160 },
        finetuned_cer: 0.4 * (1.0 + reduction),
        reduction,
    }
}

#[test]
fn combo_plot_follows_registry_order() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    fs::create_dir(&input).unwrap();
    // Deliberately shuffled relative to the registry.
    let names = ["B1C1G1M1", "NONE", "B2C2G3M2", "B1", "B1G1"];
    let records: Vec<ExperimentRecord> =
        names.iter().enumerate().flat_map(|(i, n)| [record(20, n, 64, -0.1 * i as f64), record(21, n, 64, -0.05)]).collect();
    fs::write(input.join("report.json"), serde_json::json!({ "records": records }).to_string()).unwrap();
    let out = tmp.path().join("out");
    let o = run(&["report", "--in", input.to_str().unwrap(), "--plot", "combo,writer", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("combo-c064.json")).unwrap()).unwrap();
    let labels: Vec<String> = sidecar["data"]["boxes"].as_array().unwrap().iter().map(|b| b["label"].as_str().unwrap().to_string()).collect();
    let mut expected: Vec<Combo> = names.iter().map(|n| Combo::parse(n).unwrap()).collect();
    expected.sort_by_key(|c| c.registry_index().unwrap());
    assert_eq!(labels, expected.iter().map(Combo::to_string).collect::<Vec<_>>());
    assert_eq!(labels[0], "NONE");

    for e in fs::read_dir(&out).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "svg") {
            let text = fs::read_to_string(&p).unwrap();
            roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            assert!(p.with_extension("json").exists());
        }
    }
}

#[test]
fn unknown_plot_kind_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["report", "--in", tmp.path().to_str().unwrap(), "--plot", "pie", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

/// Small dataset with one target writer, a base model, one finetune run,
/// then estimation, evaluation and reporting on its outputs.
#[test]
fn pipeline_on_a_small_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let o = run(&[
        "gen-data", "--writers", "2", "--lines-per-writer", "8", "--test-lines", "2", "--targets", "1", "--seed", "3", "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // Zero iterations: the initialized model and an empty curve file.
    let base0 = root.join("base0");
    let o = run(&["train-base", "--data", data.to_str().unwrap(), "--iters", "0", "--aug", "NONE", "--out", base0.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dir = only_subdir(&base0, "base-");
    assert!(dir.join("base.ckpt").exists());
    assert!(FinetuneCurves::load(&dir.join("curves.jsonl")).unwrap().points.is_empty());

    let base = root.join("base");
    let o = run(&["train-base", "--data", data.to_str().unwrap(), "--iters", "40", "--aug", "B1C1G1M1", "--out", base.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dir = only_subdir(&base, "base-");
    let curves = FinetuneCurves::load(&dir.join("curves.jsonl")).unwrap();
    assert_eq!(curves.points.len(), 40 / 20);
    let ckpt = dir.join("base.ckpt");

    let o = run(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--writer", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("CER"));

    let ft = root.join("ft");
    let args = [
        "finetune", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--clusters", "16", "--budgets", "40",
        "--runs", "1", "--estimator", "X", "--factor", "1.5", "--seed", "5", "--out", ft.to_str().unwrap(),
    ];
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dir = only_subdir(&ft, "finetune-");
    let results: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("results.json")).unwrap()).unwrap();
    let records: Vec<ExperimentRecord> = serde_json::from_value(results["records"].clone()).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].cluster, 16);
    assert!(records[0].estimate.iteration <= 40 && records[0].estimate.iteration % 20 == 0);
    let before = files(&dir);
    // Same flags, same directory, same bytes.
    assert_eq!(code(&run(&args)), 0);
    assert_eq!(files(&dir), before);

    let curve = dir.join("curves/NONE-w002-r0-c016.jsonl");
    let folds: Vec<String> = (0..4).map(|k| dir.join(format!("curves/NONE-w002-r0-c016-f{k}.jsonl")).display().to_string()).collect();
    let o = run(&["estimate-stop", "--curves", curve.to_str().unwrap(), "--folds", &folds.join(","), "--estimator", "X", "--factor", "1.5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let est: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(est["estimate"]["iteration"].as_u64().unwrap(), records[0].estimate.iteration);

    let o = run(&["estimate-stop", "--curves", curve.to_str().unwrap(), "--estimator", "S", "--factor", "3", "--ratio-preset", "paper-S3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let est: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    // 33 iterations per line at 16 lines, limited to the 40-iteration budget.
    assert_eq!(est["estimate"]["raw"].as_u64().unwrap(), 40);

    let rep = root.join("report");
    let o = run(&["report", "--in", ft.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for stem in ["combo-c016", "cluster-NONE", "curves-NONE", "writer-NONE"] {
        let svg = fs::read_to_string(rep.join(format!("{stem}.svg"))).unwrap();
        roxmltree::Document::parse(&svg).unwrap();
        assert!(rep.join(format!("{stem}.json")).exists());
    }
}
