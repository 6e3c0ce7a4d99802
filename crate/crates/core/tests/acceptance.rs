//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line and then
//! asserts. Criteria run one at a time so their timings are meaningful.
//!
//! The full desk adaptation experiment takes about an hour and a half on one
//! core; it is ignored by default:
//!
//! ```text
//! cargo test --release --test acceptance -- --ignored --nocapture
//! ```
//!
//! Set `CTC_ADAPT_ACCEPTANCE_DIR` to keep (and reuse) its dataset, base model
//! and curves.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ctc_adapt::adapt::experiment::{run_experiment, ExperimentConfig, ExperimentReport};
use ctc_adapt::adapt::{
    estimate_stop, fit_iterations, snap_to_grid, CurveMeta, CurvePoint, EstimatorSpec, FinetuneCurves, StopInputs, Strategy, WarmupSchedule,
    EVAL_EVERY,
};
use ctc_adapt::augment::{apply_basic, apply_combo_traced, augment_sample, stream, AugmentRanges, BasicAugmentation, Combo, Kind};
use ctc_adapt::ctc::{ctc_brute_force, ctc_forward_backward, ctc_loss_grad, LabelSequence};
use ctc_adapt::dataset::{build_dataset, DatasetSpec, Manifest, TextSource};
use ctc_adapt::eval::{edit_distance, relative_reduction};
use ctc_adapt::numerics::{finite_diff_check, FdOptions, NumericsError, Tensor};
use ctc_adapt::raster::Image;
use ctc_adapt::recognizer::{batch_ctc, forward_tape, Checkpoint, Recognizer, RecognizerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

static SERIAL: Mutex<()> = Mutex::new(());

/// Prints the verdict line and fails the test on FAIL.
fn verdict(n: u32, name: &str, pass: bool, detail: &str, elapsed: Duration, limit: Option<Duration>) {
    let in_time = limit.map_or(true, |l| elapsed <= l);
    let ok = pass && in_time;
    let limit = limit.map(|l| format!(" / limit {:.0} s", l.as_secs_f64())).unwrap_or_default();
    // Straight to the handle so the line survives libtest's output capture.
    let _ = writeln!(
        std::io::stdout().lock(),
        "{} criterion {n} ({name}): {detail} [{:.1} s{limit}]",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    assert!(pass, "criterion {n} failed: {detail}");
    assert!(in_time, "criterion {n} exceeded its time limit");
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn random_log_probs(t: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut d = Vec::with_capacity(t * k);
    for _ in 0..t {
        let row: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        d.extend(row.iter().map(|v| v - lse));
    }
    Tensor::new(vec![t, k], d).unwrap()
}

#[test]
fn criterion_01_ctc_matches_enumeration() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut infeasible_agree = true;
    let draws = 500;
    for _ in 0..draws {
        let t = rng.gen_range(1..=6);
        let k = rng.gen_range(2..=4);
        let len = rng.gen_range(0..=3);
        let lp = random_log_probs(t, k, &mut rng);
        let target = LabelSequence((0..len).map(|_| rng.gen_range(1..k)).collect());
        let brute = ctc_brute_force(&lp, &target).unwrap();
        match ctc_loss_grad(&lp, &target) {
            Ok((loss, _)) => worst = worst.max((loss - brute).abs()),
            Err(_) => infeasible_agree &= brute.is_infinite(),
        }
    }
    verdict(
        1,
        "CTC oracle",
        worst <= 1e-9 && infeasible_agree,
        &format!("{draws} draws, max |DP - enumeration| = {worst:.2e} (tol 1e-9)"),
        start.elapsed(),
        Some(Duration::from_secs(10)),
    );
}

#[test]
fn criterion_02_ctc_gradient() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Five-point stencil: a 1e-5 central difference is rounding-limited on the
    // smallest gradient coordinates.
    let eps = 1e-3;
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 100 {
        let (t, k) = (rng.gen_range(2..=8), rng.gen_range(2..=5));
        let lp = random_log_probs(t, k, &mut rng);
        let len = rng.gen_range(0..=t / 2);
        let target = LabelSequence((0..len).map(|_| rng.gen_range(1..k)).collect());
        if target.min_frames() > t {
            continue;
        }
        cases += 1;
        let (_, grad) = ctc_forward_backward(&lp, &target).unwrap();
        for i in 0..lp.len() {
            let f = |d: f64| {
                let mut p = lp.clone();
                p.data_mut()[i] += d;
                ctc_forward_backward(&p, &target).unwrap().0
            };
            let num = (8.0 * (f(eps) - f(-eps)) - (f(2.0 * eps) - f(-2.0 * eps))) / (12.0 * eps);
            let a = grad.data()[i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
    }
    verdict(
        2,
        "CTC gradient",
        worst <= 1e-5,
        &format!("{cases} cases, max relative error {worst:.2e} (tol 1e-5)"),
        start.elapsed(),
        Some(Duration::from_secs(30)),
    );
}

#[test]
fn criterion_03_end_to_end_gradient() {
    let _g = serial();
    let start = Instant::now();
    let cfg = RecognizerConfig::desk();
    let m = Recognizer::build(cfg.clone(), 7).unwrap();
    let img = Tensor::new(vec![2, 1, 40, 32], (0..2 * 40 * 32).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect()).unwrap();
    let targets = vec![LabelSequence(vec![1, 2, 3]), LabelSequence(vec![4, 4])];
    let opts = FdOptions { eps: 1e-5, abs_floor: 1e-6, coords_per_param: Some(24), seed: 5 };
    let report = finite_diff_check(
        |tape, p| {
            let x = tape.constant(img.clone());
            let out = forward_tape(&cfg, tape, p, x).map_err(|e| NumericsError::Other(e.to_string()))?;
            let (loss, grad, _) = batch_ctc(tape.value(out), &targets).map_err(|e| NumericsError::Other(e.to_string()))?;
            tape.external_loss(out, loss, grad)
        },
        m.params(),
        &opts,
    )
    .unwrap();
    let (worst_i, _) = report.worst;
    verdict(
        3,
        "end-to-end gradient",
        report.per_param.iter().all(|e| *e <= 1e-3),
        &format!(
            "{} tensors, {} coordinates, max relative error {:.2e} in {} (tol 1e-3)",
            report.per_param.len(),
            report.coords_checked,
            report.max_rel_error,
            m.param_names()[worst_i]
        ),
        start.elapsed(),
        Some(Duration::from_secs(300)),
    );
}

/// A U-shaped loss curve on the evaluation grid with its minimum at
/// `minimum` iterations, plus Gaussian noise.
fn u_curve(budget: u64, minimum: f64, width: f64, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = Normal::new(0.0, noise).unwrap();
    (1..=budget / EVAL_EVERY)
        .map(|i| {
            let it = (i * EVAL_EVERY) as f64;
            1.0 + ((it - minimum) / width).powi(2) + n.sample(rng)
        })
        .collect()
}

#[test]
fn criterion_04_estimators_on_noisy_curves() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cases = 200;
    let tolerance = 80.0;
    let mut hits: BTreeMap<&str, usize> = BTreeMap::new();
    let mut x_ge_m = 0;
    let mut clamp_exact = 0;
    let spec = |s| EstimatorSpec::new(s, 1.0).unwrap();
    for _ in 0..cases {
        let budget = 20 * rng.gen_range(50..=150);
        let minimum = rng.gen_range(0.2..0.7) * budget as f64;
        let folds: Vec<Vec<f64>> = (0..4).map(|_| u_curve(budget, minimum, 200.0, 0.01, &mut rng)).collect();
        let inputs = StopInputs { budget, fold_losses: Some(&folds), ..Default::default() };
        let mut got = BTreeMap::new();
        for (name, s) in [("A", Strategy::A), ("M", Strategy::M), ("X", Strategy::X)] {
            let e = estimate_stop(&spec(s), &inputs).unwrap();
            if (e.iteration as f64 - minimum).abs() <= tolerance {
                *hits.entry(name).or_default() += 1;
            }
            got.insert(name, e);
        }
        x_ge_m += usize::from(got["X"].iteration >= got["M"].iteration);

        // A factor large enough to overshoot is limited to the budget; a
        // small one is applied as is.
        let r = budget as f64 / got["X"].raw as f64 + 0.5;
        let big = estimate_stop(&EstimatorSpec::new(Strategy::X, r).unwrap(), &inputs).unwrap();
        let small = estimate_stop(&EstimatorSpec::new(Strategy::X, 1.5).unwrap(), &inputs).unwrap();
        let small_expected = snap_to_grid(got["X"].raw as f64 * 1.5, budget);
        clamp_exact += usize::from(big.iteration == budget && small.iteration == small_expected.min(budget));
    }
    let rate = |k: &str| hits.get(k).copied().unwrap_or(0) as f64 / cases as f64;
    let pass = ["A", "M", "X"].iter().all(|k| rate(k) >= 0.95) && x_ge_m == cases && clamp_exact == cases;
    verdict(
        4,
        "stopping estimators",
        pass,
        &format!(
            "within 80 it: A {:.3}, M {:.3}, X {:.3} (need 0.95); X >= M {x_ge_m}/{cases}; R-clamp exact {clamp_exact}/{cases}",
            rate("A"),
            rate("M"),
            rate("X")
        ),
        start.elapsed(),
        None,
    );
}

#[test]
fn criterion_05_schedule_exact() {
    let _g = serial();
    let start = Instant::now();
    let s = WarmupSchedule::paper();
    let points = [(0u64, 0.0), (10_000, 3e-4), (210_000, 0.7e-4), (410_000, 0.175e-4)];
    let exact = points.iter().all(|&(it, lr)| s.lr_at(it) == lr);
    let monotone = s.segments.iter().all(|seg| {
        let lrs: Vec<f64> = (seg.start..=seg.start + seg.duration).map(|i| s.lr_at(i)).collect();
        lrs.windows(2).all(|w| w[0] <= w[1])
    });
    let got: Vec<String> = points.iter().map(|&(it, _)| format!("lr({it})={:e}", s.lr_at(it))).collect();
    verdict(5, "schedule", exact && monotone, &format!("{}; monotone within windows: {monotone}", got.join(", ")), start.elapsed(), None);
}

fn check_experiment(report: &ExperimentReport, full: bool) -> (bool, String) {
    let aug = Combo::parse("B1C1G1M1").unwrap();
    let none = Combo::none();
    let at = |c: &Combo, n| report.mean_reduction(c, n);
    let r64 = at(&aug, 64);
    let mut pass = r64.is_some_and(|r| r < -0.10);
    let mut detail = format!("base CER {:.4}; B1C1G1M1 mean reduction at 64 lines {}", report.base_test_cer, fmt(r64));
    if full {
        let (r16, r256, n64) = (at(&aug, 16), at(&aug, 256), at(&none, 64));
        let more_lines = matches!((r256, r16), (Some(a), Some(b)) if a <= b);
        let aug_helps = matches!((r64, n64), (Some(a), Some(b)) if a <= b);
        pass &= more_lines && aug_helps;
        detail += &format!(
            " (need < -0.10); at 16 {}, at 256 {} (need 256 <= 16); NONE at 64 {} (need B1C1G1M1 <= NONE)",
            fmt(r16),
            fmt(r256),
            fmt(n64)
        );
    } else {
        detail += " (need < -0.10)";
    }
    (pass, detail)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("missing".into(), |v| format!("{v:.4}"))
}

fn experiment_dir(name: &str) -> (Option<tempfile::TempDir>, PathBuf) {
    match std::env::var_os("CTC_ADAPT_ACCEPTANCE_DIR") {
        Some(d) => (None, PathBuf::from(d).join(name)),
        None => {
            let t = tempfile::tempdir().unwrap();
            let p = t.path().to_path_buf();
            (Some(t), p)
        }
    }
}

#[test]
fn criterion_06_desk_adaptation_tiny() {
    let _g = serial();
    let start = Instant::now();
    let (_keep, dir) = experiment_dir("desk-tiny");
    let report = run_experiment(&ExperimentConfig::desk_tiny(), &dir).unwrap();
    let (pass, detail) = check_experiment(&report, false);
    verdict(6, "desk adaptation, tiny", pass, &detail, start.elapsed(), Some(Duration::from_secs(15 * 60)));
}

#[test]
#[ignore = "about an hour and a half on one core"]
fn criterion_06_desk_adaptation_full() {
    let _g = serial();
    let start = Instant::now();
    let (_keep, dir) = experiment_dir("desk");
    let report = run_experiment(&ExperimentConfig::desk(), &dir).unwrap();
    let (pass, detail) = check_experiment(&report, true);
    verdict(6, "desk adaptation, full", pass, &detail, start.elapsed(), Some(Duration::from_secs(2 * 3600)));
}

/// Dark strokes on white, 40 px high.
fn specimen(width: usize) -> Image {
    let data = (0..40 * width)
        .map(|i| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            let stroke = ((x * 0.35 + y * 0.12).sin() * (y * 0.2).cos()).abs();
            if stroke > 0.8 {
                0.1
            } else {
                0.95
            }
        })
        .collect();
    Image::new(1, 40, width, data).unwrap()
}

#[test]
fn criterion_07_augmentation() {
    let _g = serial();
    let start = Instant::now();
    let ranges = AugmentRanges::default();
    let img = specimen(64);
    let identity = (0..200).all(|i| augment_sample(&Combo::none(), &img, &ranges, i % 7, i) == img);

    let golden = [
        (Kind::NoiseBlurGamma, 2, "ebad869f26be03c758b4a24f9df1238022cbd90a7b11e0804e74f0f9706cfec4"),
        (Kind::Color, 2, "8476c5ce8b98a7fc58fd7878edba36c17c34a36954834e354819b0a67666ff14"),
        (Kind::Geometry, 3, "9163622f7ad6e6b716949904704e0b7e71ff10ff1aa51474f6d15fe03c5b8aed"),
        (Kind::Masking, 2, "cd6c58e46fd7073bcc430319ab83431f67377dd2417633ab909007c34eb064c4"),
    ];
    let wide = specimen(160);
    let hashes_ok = golden.iter().all(|&(kind, level, hash)| {
        let part = BasicAugmentation::new(kind, level).unwrap();
        apply_basic(part, &wide, &ranges, &mut stream(1, 0)).hash() == hash
    });

    let combo = Combo::registered("B1C1G1M1").unwrap();
    let small = specimen(48);
    let draws = 10_000;
    let mut counts = [0usize; 4];
    for i in 0..draws {
        let (_, fired) = apply_combo_traced(&combo, &small, &ranges, &mut stream(42, i));
        for k in fired {
            counts[Kind::ALL.iter().position(|&a| a == k).unwrap()] += 1;
        }
    }
    let rates: Vec<(Kind, f64)> = Kind::ALL.iter().zip(counts).map(|(&k, c)| (k, c as f64 / draws as f64)).collect();
    let rates_ok = rates.iter().all(|(k, r)| (r - k.probability()).abs() <= 0.02);
    let shown: Vec<String> = rates.iter().map(|(k, r)| format!("{}={r:.3}", k.letter())).collect();
    verdict(
        7,
        "augmentation",
        identity && hashes_ok && rates_ok,
        &format!("NONE identity {identity}; golden hashes {hashes_ok}; firing rates {} (tol 0.02)", shown.join(" ")),
        start.elapsed(),
        None,
    );
}

fn random_string(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(0..10);
    (0..len).map(|_| ['a', 'b', 'c', 'd', ' '][rng.gen_range(0..5)]).collect()
}

#[test]
fn criterion_08_metric_properties() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pairs = 10_000;
    let mut violations = 0;
    for _ in 0..pairs {
        let (a, b, c) = (random_string(&mut rng), random_string(&mut rng), random_string(&mut rng));
        let ab = edit_distance(&a, &b);
        let ok = edit_distance(&a, &a) == 0
            && (ab == 0) == (a == b)
            && ab == edit_distance(&b, &a)
            && ab <= edit_distance(&a, &c) + edit_distance(&c, &b)
            && ab >= a.chars().count().abs_diff(b.chars().count())
            && ab <= a.chars().count().max(b.chars().count());
        violations += usize::from(!ok);
    }
    let rr = relative_reduction(4.0, 3.0).unwrap();
    verdict(
        8,
        "metric properties",
        violations == 0 && rr == -0.25,
        &format!("{pairs} triples, {violations} axiom violations; relative_reduction(4, 3) = {rr}"),
        start.elapsed(),
        None,
    );
}

#[test]
fn criterion_09_persistence() {
    let _g = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();

    let m = Recognizer::build(RecognizerConfig::desk(), 9).unwrap();
    let x = Tensor::new(vec![1, 1, 40, 48], (0..40 * 48).map(|i| ((i * 31) % 17) as f64 / 16.0).collect()).unwrap();
    let before = m.forward(&x).unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::new(m).save(&path).unwrap();
    let after = Checkpoint::load(&path).unwrap().model.forward(&x).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let ckpt_ok = bits(&before) == bits(&after);

    let spec = DatasetSpec {
        base_writers: 2,
        base_train_lines: 5,
        base_test_lines: 2,
        target_writers: 0,
        text: TextSource::Random { min_chars: 2, max_chars: 6 },
        ..DatasetSpec::desk()
    };
    let data_dir = dir.path().join("data");
    build_dataset(&spec, &data_dir).unwrap();
    let text = std::fs::read_to_string(data_dir.join("manifest.jsonl")).unwrap();
    let manifest_ok = Manifest::from_jsonl(&text).unwrap().to_jsonl() == text;

    let curves = FinetuneCurves {
        meta: CurveMeta::base(Combo::none(), 3, 60),
        points: (1..=3)
            .map(|i| CurvePoint { iteration: i * 20, train_loss: 1.0 / i as f64, test_loss: 0.1 * i as f64 + 1e-17, test_cer: 1.0 / 3.0 })
            .collect(),
    };
    let cpath = dir.path().join("c.jsonl");
    curves.save(&cpath).unwrap();
    let first = std::fs::read(&cpath).unwrap();
    let loaded = FinetuneCurves::load(&cpath).unwrap();
    loaded.save(&cpath).unwrap();
    let curves_ok = loaded == curves && std::fs::read(&cpath).unwrap() == first;

    verdict(
        9,
        "persistence",
        ckpt_ok && manifest_ok && curves_ok,
        &format!("checkpoint forward bit-identical {ckpt_ok}; manifest round-trip {manifest_ok}; curves round-trip {curves_ok}"),
        start.elapsed(),
        None,
    );
}

#[test]
fn criterion_10_polynomial_fit() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    let mut coef_err = 0.0f64;
    for trial in 0..50 {
        let degree = trial % 3;
        let truth: Vec<f64> = (0..=degree).map(|_| rng.gen_range(-300.0..300.0)).collect();
        let f = |n: usize| {
            let x = (n as f64).log2();
            truth.iter().rev().fold(0.0, |acc, c| acc * x + c)
        };
        let samples: Vec<(usize, f64)> = [1, 2, 4, 8, 16, 32, 64, 128, 256].iter().map(|&n| (n, f(n))).collect();
        let fit = fit_iterations(&samples, 2).unwrap();
        worst = worst.max(fit.max_residual);
        for (i, c) in fit.coefficients.iter().enumerate() {
            coef_err = coef_err.max((c - truth.get(i).copied().unwrap_or(0.0)).abs());
        }
    }
    verdict(
        10,
        "polynomial fit",
        worst <= 1e-9,
        &format!("50 noiseless fits of degree <= 2, max residual {worst:.2e} (tol 1e-9), max coefficient error {coef_err:.2e}"),
        start.elapsed(),
        None,
    );
}
