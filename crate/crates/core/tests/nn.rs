use proptest::prelude::*;
use qroute::nn::{gradient_check, load_checkpoint, save_checkpoint, Adam, Gru, Mlp, MlpSpec, NnError, ParamTensor, Parameterized};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Loss `sum(w * f(x))` so every output gets a distinct upstream gradient.
fn mlp_loss(m: &mut Mlp, x: &[f64], w: &[f64], back: bool) -> f64 {
    let (y, cache) = m.forward(x).unwrap();
    if back {
        m.backward(&cache, w).unwrap();
    }
    y.iter().zip(w).map(|(a, b)| a * b).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn mlp_gradients_on_random_specs(widths in prop::collection::vec(1usize..9, 2..5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mlp = Mlp::init(&MlpSpec::new(&widths), &mut rng);
        for p in mlp.params_mut() {
            // Non-zero biases keep ReLU kinks away from the probe points.
            for v in &mut p.values {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let x = random_vec(&mut rng, widths[0]);
        let w = random_vec(&mut rng, *widths.last().unwrap());
        let report = gradient_check(&mut mlp, |m, b| mlp_loss(m, &x, &w, b), 1e-5, 40);
        prop_assert!(report.max_rel_error <= 1e-4, "{:?}", report);
    }

    #[test]
    fn gru_gradients_on_random_specs(input in 1usize..8, hidden in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gru = Gru::init(input, hidden, &mut rng);
        let h = random_vec(&mut rng, hidden);
        let x = random_vec(&mut rng, input);
        let w = random_vec(&mut rng, hidden);
        let report = gradient_check(
            &mut gru,
            |g, back| {
                let (y, cache) = g.forward(&h, &x).unwrap();
                if back {
                    g.backward(&cache, &w).unwrap();
                }
                y.iter().zip(&w).map(|(a, b)| a * b).sum()
            },
            1e-5,
            40,
        );
        prop_assert!(report.max_rel_error <= 1e-4, "{:?}", report);
    }

    #[test]
    fn gru_input_gradient_matches_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gru = Gru::init(3, 4, &mut rng);
        let h = random_vec(&mut rng, 4);
        let x = random_vec(&mut rng, 3);
        let w = random_vec(&mut rng, 4);
        let (_, cache) = gru.forward(&h, &x).unwrap();
        let (dh, dx) = gru.backward(&cache, &w).unwrap();
        let f = |h: &[f64], x: &[f64]| -> f64 {
            gru.infer(h, x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for i in 0..4 {
            let (mut hp, mut hm) = (h.clone(), h.clone());
            hp[i] += eps;
            hm[i] -= eps;
            let num = (f(&hp, &x) - f(&hm, &x)) / (2.0 * eps);
            prop_assert!((num - dh[i]).abs() < 1e-6);
        }
        for i in 0..3 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += eps;
            xm[i] -= eps;
            let num = (f(&h, &xp) - f(&h, &xm)) / (2.0 * eps);
            prop_assert!((num - dx[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_pure(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::init(&MlpSpec::new(&[4, 6, 2]), &mut rng);
        let x = random_vec(&mut rng, 4);
        prop_assert_eq!(mlp.infer(&x).unwrap(), mlp.infer(&x).unwrap());
    }
}

#[test]
fn adam_step_tends_to_learning_rate() {
    // With a constant unit gradient the bias-corrected moments are exactly
    // m_hat = 1 and v_hat = 1, so every step is lr / (1 + eps).
    let mut p = ParamTensor::zeros(&[1]);
    let mut adam = Adam::new(0.05);
    let mut last = 0.0;
    for _ in 0..20 {
        p.grad[0] = 1.0;
        adam.step(&mut [&mut p]).unwrap();
        let delta = last - p.values[0];
        assert!((delta - 0.05 / (1.0 + 1e-8)).abs() < 1e-12);
        last = p.values[0];
        assert_eq!(p.grad[0], 0.0);
    }
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut p = ParamTensor::zeros(&[2]);
    p.grad[1] = f64::INFINITY;
    let mut adam = Adam::new(0.1);
    assert!(matches!(adam.step(&mut [&mut p]), Err(NnError::NonFinite(_))));
    assert_eq!(p.values, vec![0.0, 0.0]);
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mlp.ckpt");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mlp = Mlp::init(&MlpSpec::new(&[7, 9, 3]), &mut rng);
    save_checkpoint(&mlp, &path).unwrap();
    let mut back = Mlp::zeros(&MlpSpec::new(&[7, 9, 3]));
    load_checkpoint(&mut back, &path).unwrap();
    for (a, b) in mlp.params().iter().zip(back.params()) {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.values), bits(&b.values));
    }
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&mut back, &path).is_err());
    assert!(load_checkpoint(&mut back, dir.path().join("missing")).is_err());
}
