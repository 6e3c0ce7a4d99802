use ctc_adapt::ctc::LabelSequence;
use ctc_adapt::numerics::{finite_diff_check, FdOptions, NumericsError, Tensor};
use ctc_adapt::recognizer::{batch_ctc, forward_tape, Checkpoint, Recognizer, RecognizerConfig};

fn wave_image(w: usize) -> Tensor {
    let data = (0..40 * w)
        .map(|i| {
            let (h, x) = (i / w, i % w);
            0.5 + 0.5 * (0.3 * h as f64 + 0.17 * x as f64).sin()
        })
        .collect();
    Tensor::new(vec![1, 1, 40, w], data).unwrap()
}

#[test]
fn desk_seed7_golden_output() {
    let m = Recognizer::build(RecognizerConfig::desk(), 7).unwrap();
    let lp = m.forward(&wave_image(64)).unwrap();
    assert_eq!(lp.shape(), &[16, 1, 38]);
    let golden = [
        -3.6330619278931526,
        -3.646530150496789,
        -3.6350873010973115,
        -3.6391232623913146,
        -3.637503810636871,
        -3.637042335869654,
    ];
    for (a, g) in lp.data().iter().zip(golden) {
        assert!((a - g).abs() <= 1e-9, "{a} vs {g}");
    }
    let sum: f64 = lp.data().iter().sum();
    assert!((sum - -2.211703036890974e3).abs() <= 1e-7, "{sum}");
}

#[test]
fn checkpoint_preserves_forward_bitwise() {
    let m = Recognizer::build(RecognizerConfig::desk(), 7).unwrap();
    let before = m.forward(&wave_image(32)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("desk.ckpt");
    Checkpoint::new(m).save(&path).unwrap();
    let after = Checkpoint::load(&path).unwrap().model.forward(&wave_image(32)).unwrap();
    assert_eq!(
        before.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        after.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn end_to_end_gradient_every_parameter() {
    let cfg = RecognizerConfig::desk();
    let m = Recognizer::build(cfg.clone(), 7).unwrap();
    let img = Tensor::new(vec![2, 1, 40, 32], (0..2 * 40 * 32).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect()).unwrap();
    let targets = vec![LabelSequence(vec![1, 2, 3]), LabelSequence(vec![4, 4])];
    // A step of 1e-4 straddles a ReLU kink of one first-layer bias coordinate.
    let opts = FdOptions { eps: 1e-5, abs_floor: 1e-6, coords_per_param: Some(12), seed: 3 };
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
    for (name, err) in m.param_names().iter().zip(&report.per_param) {
        assert!(*err <= 1e-3, "{name}: {err}");
    }
}
