use ctc_adapt::ctc::{best_path_decode, collapse, ctc_brute_force, ctc_forward_backward, ctc_loss_grad, LabelSequence};
use ctc_adapt::numerics::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_log_probs(t: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut d = Vec::with_capacity(t * k);
    for _ in 0..t {
        let row: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        d.extend(row.iter().map(|v| v - lse));
    }
    Tensor::new(vec![t, k], d).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dynamic_program_matches_enumeration(seed in 0u64..u64::MAX, t in 1usize..6, k in 2usize..5, len in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lp = random_log_probs(t, k, &mut rng);
        let target = LabelSequence((0..len).map(|_| rng.gen_range(1..k)).collect());
        let brute = ctc_brute_force(&lp, &target).unwrap();
        match ctc_loss_grad(&lp, &target) {
            Ok((loss, _)) => prop_assert!((loss - brute).abs() <= 1e-9, "{} vs {}", loss, brute),
            Err(_) => prop_assert!(brute.is_infinite()),
        }
    }

    #[test]
    fn gradient_matches_central_differences(seed in 0u64..u64::MAX) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, k) = (rng.gen_range(2..7), rng.gen_range(2..5));
        let lp = random_log_probs(t, k, &mut rng);
        let len = rng.gen_range(0..=t / 2);
        let target = LabelSequence((0..len).map(|_| rng.gen_range(1..k)).collect());
        prop_assume!(target.min_frames() <= t);
        let (_, grad) = ctc_forward_backward(&lp, &target).unwrap();
        // Five-point stencil; plain central differences are rounding-limited
        // on tiny gradient coordinates.
        let eps = 1e-3;
        for i in 0..lp.len() {
            let f = |d: f64| {
                let mut p = lp.clone();
                p.data_mut()[i] += d;
                ctc_forward_backward(&p, &target).unwrap().0
            };
            let num = (8.0 * (f(eps) - f(-eps)) - (f(2.0 * eps) - f(-2.0 * eps))) / (12.0 * eps);
            let a = grad.data()[i];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            prop_assert!(err <= 1e-5, "coord {}: {} vs {}", i, a, num);
        }
    }

    #[test]
    fn decode_is_collapse_of_argmax(path in prop::collection::vec(0usize..4, 1..12)) {
        let k = 4;
        let mut d = vec![-5.0; path.len() * k];
        for (t, &c) in path.iter().enumerate() {
            d[t * k + c] = -0.1;
        }
        let lp = Tensor::new(vec![path.len(), k], d).unwrap();
        let decoded = best_path_decode(&lp);
        prop_assert_eq!(&decoded, &collapse(&path));
        prop_assert!(decoded.0.iter().all(|&c| c != 0));
    }
}
