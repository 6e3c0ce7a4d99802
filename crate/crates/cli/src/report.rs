//! Aggregation of run records into tables and plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use ctc_adapt::adapt::experiment::{summarize, ExperimentRecord, SummaryRow};
use ctc_adapt::adapt::FinetuneCurves;
use ctc_adapt::augment::Combo;
use serde::Deserialize;

use crate::plot::{BoxSummary, Plot, PlotData, Series};

pub const PLOT_KINDS: [&str; 4] = ["combo", "cluster", "curves", "writer"];

/// Files that carry run records: experiment reports and finetune results.
const RECORD_FILES: [&str; 2] = ["report.json", "results.json"];

#[derive(Deserialize)]
struct RecordFile {
    records: Vec<ExperimentRecord>,
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

pub struct Collected {
    pub records: Vec<ExperimentRecord>,
    pub curves: Vec<FinetuneCurves>,
}

/// Every record and finetuning curve below `dir`.
pub fn collect(dir: &Path) -> Result<Collected> {
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    let mut records = Vec::new();
    let mut curves = Vec::new();
    for f in files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if RECORD_FILES.contains(&name) {
            let parsed: RecordFile = serde_json::from_str(&fs::read_to_string(&f)?)?;
            records.extend(parsed.records);
        } else if name.ends_with(".jsonl") {
            // Manifests and other line files are not curves; skip them.
            if let Ok(c) = FinetuneCurves::load(&f) {
                if c.meta.kind == "finetune" {
                    curves.push(c);
                }
            }
        }
    }
    Ok(Collected { records, curves })
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>7} {:>8} {:>9} {:>8} {:>9} {:>9} {:>8}", "combo", "cluster", "writers", "mean", "std", "min", "median", "max");
    for r in rows {
        let st = &r.stats;
        let _ = writeln!(
            s,
            "{:<12} {:>7} {:>8} {:>9.4} {:>8.4} {:>9.4} {:>9.4} {:>8.4}",
            r.combo.to_string(),
            r.cluster,
            st.per_writer.len(),
            st.mean,
            st.std,
            st.min,
            st.median,
            st.max
        );
    }
    s
}

fn combos_in_order(rows: &[SummaryRow]) -> Vec<Combo> {
    let mut out: Vec<Combo> = Vec::new();
    for r in rows {
        if !out.contains(&r.combo) {
            out.push(r.combo.clone());
        }
    }
    out
}

/// Plots of the requested kinds as `(file stem, plot)`.
pub fn build_plots(records: &[ExperimentRecord], curves: &[FinetuneCurves], kinds: &[String]) -> Result<Vec<(String, Plot)>> {
    let rows = summarize(records)?;
    let combos = combos_in_order(&rows);
    let mut clusters: Vec<usize> = rows.iter().map(|r| r.cluster).collect();
    clusters.sort_unstable();
    clusters.dedup();
    let mut plots = Vec::new();
    let wants = |k: &str| kinds.iter().any(|x| x == k);

    if wants("combo") {
        for &c in &clusters {
            // `rows` already lists combos in registry order.
            let boxes = rows
                .iter()
                .filter(|r| r.cluster == c)
                .map(|r| BoxSummary {
                    label: r.combo.to_string(),
                    min: r.stats.min,
                    q1: r.stats.q1,
                    median: r.stats.median,
                    q3: r.stats.q3,
                    max: r.stats.max,
                    mean: r.stats.mean,
                })
                .collect();
            let title = format!("Relative CER reduction by augmentation, {c} lines");
            plots.push((
                format!("combo-c{c:03}"),
                Plot { kind: "combo".into(), title, data: PlotData::Boxes { y_label: "relative CER reduction".into(), boxes } },
            ));
        }
    }
    if wants("cluster") || wants("writer") {
        for combo in &combos {
            let mine: Vec<&SummaryRow> = rows.iter().filter(|r| &r.combo == combo).collect();
            let mut by_writer: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
            for r in &mine {
                for (&w, &m) in &r.stats.per_writer {
                    by_writer.entry(w).or_default().push((r.cluster as f64, m));
                }
            }
            if wants("cluster") {
                let mut series: Vec<Series> = by_writer.iter().map(|(w, pts)| Series { name: format!("writer {w}"), points: pts.clone() }).collect();
                series.push(Series { name: "mean".into(), points: mine.iter().map(|r| (r.cluster as f64, r.stats.mean)).collect() });
                plots.push((
                    format!("cluster-{combo}"),
                    Plot {
                        kind: "cluster".into(),
                        title: format!("Relative CER reduction per writer, {combo}"),
                        data: PlotData::Lines { x_label: "adaptation lines".into(), y_label: "relative CER reduction".into(), x_log2: true, series },
                    },
                ));
            }
            if wants("writer") {
                let writers: Vec<u64> = by_writer.keys().copied().collect();
                let groups = mine
                    .iter()
                    .map(|r| Series {
                        name: format!("{} lines", r.cluster),
                        points: writers.iter().enumerate().filter_map(|(i, w)| r.stats.per_writer.get(w).map(|&m| (i as f64, m))).collect(),
                    })
                    .collect();
                plots.push((
                    format!("writer-{combo}"),
                    Plot {
                        kind: "writer".into(),
                        title: format!("Mean relative CER reduction per writer, {combo}"),
                        data: PlotData::Bars {
                            y_label: "relative CER reduction".into(),
                            categories: writers.iter().map(|w| format!("writer {w}")).collect(),
                            groups,
                        },
                    },
                ));
            }
        }
    }
    if wants("curves") {
        let mut grouped: BTreeMap<(Option<usize>, String), BTreeMap<usize, Vec<&FinetuneCurves>>> = BTreeMap::new();
        for c in curves {
            let combo = &c.meta.combo;
            grouped.entry((combo.registry_index(), combo.to_string())).or_default().entry(c.meta.cluster.unwrap_or(0)).or_default().push(c);
        }
        for ((_, combo), by_cluster) in grouped {
            let series = by_cluster
                .iter()
                .map(|(size, cs)| {
                    let len = cs.iter().map(|c| c.points.len()).min().unwrap_or(0);
                    let points = (0..len)
                        .map(|i| {
                            let it = cs[0].points[i].iteration as f64;
                            (it, cs.iter().map(|c| c.points[i].test_cer).sum::<f64>() / cs.len() as f64)
                        })
                        .collect();
                    Series { name: format!("{size} lines"), points }
                })
                .collect();
            plots.push((
                format!("curves-{combo}"),
                Plot {
                    kind: "curves".into(),
                    title: format!("Test CER during finetuning, {combo}"),
                    data: PlotData::Lines { x_label: "iteration".into(), y_label: "test CER".into(), x_log2: false, series },
                },
            ));
        }
    }
    Ok(plots)
}
