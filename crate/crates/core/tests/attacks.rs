use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robustlab::attacks::{
    clean_accuracy, pgd, project, random_start, robust_accuracy, robust_mask, AttackConfig, AttackLoss,
};
use robustlab::tensor::{BnMode, Tape};
use robustlab::{ArchSpec, Model, Tensor};

const EPS: f64 = 8.0 / 255.0;

/// A linear classifier `f(x) = xW + b` on `d` inputs.
fn linear(d: usize, classes: usize, rng: &mut ChaCha8Rng) -> Model {
    let arch = ArchSpec::mlp(1, 1, [1, 1, d], classes);
    let mut model = Model::build(&arch, 0).unwrap();
    let w = Tensor::new(vec![d, classes], (0..d * classes).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let b = Tensor::new(vec![classes], (0..classes).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
    model.set_param_values(&[w, b]).unwrap();
    model
}

fn batch(n: usize, d: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![n, 1, 1, d], (0..n * d).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

fn mean_ce(model: &Model, x: &Tensor, y: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), false);
    let logits = model.forward(&mut tape, input, BnMode::Frozen, false).unwrap().logits;
    let loss = tape.cross_entropy(logits, y).unwrap();
    tape.value(loss).item().unwrap()
}

fn add(x: &Tensor, d: &Tensor) -> Tensor {
    x.zip_map(d, |a, b| a + b).unwrap()
}

fn assert_feasible(x: &Tensor, delta: &Tensor, eps: f64) {
    for (&xi, &di) in x.data().iter().zip(delta.data()) {
        assert!(di.abs() <= eps, "|{di}| > {eps}");
        let v = xi + di;
        assert!((0.0..=1.0).contains(&v), "x + δ = {v}");
    }
}

#[test]
fn single_step_without_start_is_fgsm() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let arch = ArchSpec::wrn(10, 1, [1, 8, 8], 2);
    let model = Model::build(&arch, 4).unwrap();
    let x = Tensor::new(vec![3, 1, 8, 8], (0..192).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let y = vec![0, 1, 1];

    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), true);
    let logits = model.forward(&mut tape, input, BnMode::Frozen, false).unwrap().logits;
    let loss = tape.cross_entropy(logits, &y).unwrap();
    let grad = tape.backward(loss).unwrap().take(input).unwrap();

    let delta = pgd(&model, &x, &y, &AttackConfig::fgsm(EPS), None, 0).unwrap().delta;
    for ((&g, &d), &xi) in grad.data().iter().zip(delta.data()).zip(x.data()) {
        let s = if g > 0.0 {
            1.0
        } else if g < 0.0 {
            -1.0
        } else {
            0.0
        };
        let want = (EPS * s).max(-xi).min(1.0 - xi);
        assert_eq!(d, want);
    }
}

#[test]
fn binary_linear_model_reaches_closed_form_worst_case() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 6;
        let model = linear(d, 2, &mut rng);
        let w = model.params()[0].value.clone();
        let x = batch(8, d, EPS, 1.0 - EPS, &mut rng);
        let y = labels(8, 2, &mut rng);
        let mut optimal = vec![0.0; x.len()];
        for (i, &label) in y.iter().enumerate() {
            for j in 0..d {
                let diff = w.data()[j * 2 + (1 - label)] - w.data()[j * 2 + label];
                optimal[i * d + j] = EPS * diff.signum();
            }
        }
        let optimal = Tensor::new(x.shape().to_vec(), optimal).unwrap();
        let worst = mean_ce(&model, &add(&x, &optimal), &y);
        for steps in [1, 3, 10] {
            for random_start in [false, true] {
                let cfg = AttackConfig { epsilon: EPS, steps, random_start, ..Default::default() };
                let delta = pgd(&model, &x, &y, &cfg, None, seed).unwrap().delta;
                assert_eq!(delta, optimal, "seed {seed} steps {steps} start {random_start}");
                assert_eq!(mean_ce(&model, &add(&x, &delta), &y), worst);
            }
        }
    }
}

#[test]
fn zero_gradient_leaves_the_random_start_in_place() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let arch = ArchSpec::mlp(1, 1, [1, 1, 5], 3);
    let mut model = Model::build(&arch, 0).unwrap();
    let zeros = model.param_values().iter().map(|t| t.map(|_| 0.0)).collect::<Vec<_>>();
    model.set_param_values(&zeros).unwrap();
    let x = batch(4, 5, 0.0, 1.0, &mut rng);
    let y = labels(4, 3, &mut rng);
    let cfg = AttackConfig::pgd(EPS, 7);
    let delta = pgd(&model, &x, &y, &cfg, None, 11).unwrap().delta;
    assert_eq!(delta, random_start(&x, EPS, 11));
    assert!(delta.max_abs() > 0.0);
    assert_eq!(mean_ce(&model, &add(&x, &delta), &y), mean_ce(&model, &x, &y));
}

#[test]
fn kl_mode_requires_clean_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = linear(4, 2, &mut rng);
    let x = batch(2, 4, 0.0, 1.0, &mut rng);
    let cfg = AttackConfig { loss_kind: AttackLoss::KlVsClean, ..Default::default() };
    assert!(pgd(&model, &x, &[0, 1], &cfg, None, 0).is_err());
    let clean = model.logits(&x).unwrap();
    let out = pgd(&model, &x, &[0, 1], &cfg, Some(&clean), 0).unwrap();
    assert_feasible(&x, &out.delta, cfg.epsilon);
}

#[test]
fn kl_attack_moves_the_prediction() {
    let arch = ArchSpec::mlp(2, 16, [1, 4, 4], 3);
    let model = Model::build(&arch, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::new(vec![6, 1, 4, 4], (0..96).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let y = labels(6, 3, &mut rng);
    let clean = model.logits(&x).unwrap();
    let kl = |delta: &Tensor| {
        let q = model.logits(&add(&x, delta)).unwrap().softmax_rows();
        robustlab::tensor::kl_divergence(&clean.softmax_rows(), &q).unwrap()
    };
    let cfg = AttackConfig { loss_kind: AttackLoss::KlVsClean, ..AttackConfig::pgd(0.1, 10) };
    let delta = pgd(&model, &x, &y, &cfg, Some(&clean), 5).unwrap().delta;
    assert!(kl(&delta) > kl(&random_start(&x, 0.1, 5)));
}

#[test]
fn rejects_bad_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = linear(4, 2, &mut rng);
    let x = batch(2, 4, 0.0, 1.0, &mut rng);
    let outside = x.map(|v| v + 1.5);
    let cfg = AttackConfig::default();
    assert!(pgd(&model, &outside, &[0, 1], &cfg, None, 0).is_err());
    assert!(pgd(&model, &x, &[0], &cfg, None, 0).is_err());
    for bad in [
        AttackConfig { epsilon: 1.0, ..cfg.clone() },
        AttackConfig { epsilon: -0.1, ..cfg.clone() },
        AttackConfig { steps: 0, ..cfg.clone() },
        AttackConfig { restarts: 0, ..cfg.clone() },
        AttackConfig { step_size: Some(-1.0), ..cfg.clone() },
    ] {
        assert!(pgd(&model, &x, &[0, 1], &bad, None, 0).is_err(), "{bad:?}");
    }
    let empty = Tensor::zeros(&[0, 1, 1, 4]);
    assert!(robust_accuracy(&model, &empty, &[], &cfg, 0).is_err());
}

#[test]
fn empty_ball_gives_clean_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let arch = ArchSpec::wrn(10, 1, [1, 8, 8], 2);
    let model = Model::build(&arch, 1).unwrap();
    let x = Tensor::new(vec![40, 1, 8, 8], (0..40 * 64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let y = labels(40, 2, &mut rng);
    let cfg = AttackConfig { epsilon: 0.0, ..AttackConfig::pgd(0.0, 5) };
    assert_eq!(robust_accuracy(&model, &x, &y, &cfg, 0).unwrap(), clean_accuracy(&model, &x, &y).unwrap());
}

#[test]
fn robust_accuracy_never_exceeds_clean_and_is_monotone_in_budget() {
    let arch = ArchSpec::mlp(2, 16, [1, 4, 4], 3);
    for seed in 0..5 {
        let model = Model::build(&arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![60, 1, 4, 4], (0..960).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let y = model.logits(&x).unwrap().argmax_rows();
        let clean = clean_accuracy(&model, &x, &y).unwrap();
        assert_eq!(clean, 1.0);

        let mut last = clean;
        for restarts in 1..=5 {
            let cfg = AttackConfig { restarts, ..AttackConfig::pgd(0.05, 3) };
            let acc = robust_accuracy(&model, &x, &y, &cfg, seed).unwrap();
            assert!(acc <= last, "restarts {restarts}: {acc} > {last}");
            last = acc;
        }

        let mut last = clean;
        for steps in 1..=8 {
            let cfg = AttackConfig { step_size: Some(0.01), ..AttackConfig::pgd(0.05, steps) };
            let mask = robust_mask(&model, &x, &y, &cfg, seed).unwrap();
            let acc = mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64;
            assert!(acc <= last, "steps {steps}: {acc} > {last}");
            last = acc;
        }
    }
}

#[test]
fn robust_accuracy_is_monotone_in_epsilon_for_binary_linear_models() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = linear(5, 2, &mut rng);
        let x = batch(100, 5, 0.0, 1.0, &mut rng);
        let y = labels(100, 2, &mut rng);
        let mut last = clean_accuracy(&model, &x, &y).unwrap();
        for k in 1..=10 {
            let cfg = AttackConfig::pgd(0.02 * k as f64, 5);
            let acc = robust_accuracy(&model, &x, &y, &cfg, seed).unwrap();
            assert!(acc <= last, "eps {}: {acc} > {last}", 0.02 * k as f64);
            last = acc;
        }
    }
}

/// Whether every point of a 41×41 grid over the feasible box around `x` is
/// classified as `label`.
fn grid_robust(model: &Model, x: [f64; 2], label: usize, eps: f64) -> bool {
    const N: usize = 41;
    let axis = |v: f64| {
        let (lo, hi) = ((v - eps).max(0.0), (v + eps).min(1.0));
        (0..N).map(move |k| lo + (hi - lo) * k as f64 / (N - 1) as f64)
    };
    let mut pts = Vec::with_capacity(N * N * 2);
    for a in axis(x[0]) {
        for b in axis(x[1]) {
            pts.extend([a, b]);
        }
    }
    let grid = Tensor::new(vec![N * N, 1, 1, 2], pts).unwrap();
    model.logits(&grid).unwrap().argmax_rows().iter().all(|&p| p == label)
}

#[test]
fn agrees_with_exhaustive_grid_on_2d_linear_models() {
    let eps = 0.1;
    let mut total = 0;
    let mut disagreements = 0;
    for classes in [2, 3] {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = linear(2, classes, &mut rng);
            let x = batch(50, 2, 0.0, 1.0, &mut rng);
            let y = model.logits(&x).unwrap().argmax_rows();
            let cfg = AttackConfig { restarts: 3, ..AttackConfig::pgd(eps, 20) };
            let mask = robust_mask(&model, &x, &y, &cfg, seed).unwrap();
            for (i, &robust) in mask.iter().enumerate() {
                let p = [x.data()[2 * i], x.data()[2 * i + 1]];
                let grid = grid_robust(&model, p, y[i], eps);
                // The grid contains every corner of the box, where a linear
                // model attains its worst margin, so it is exact here.
                if classes == 2 {
                    assert_eq!(robust, grid, "seed {seed} point {p:?}");
                } else {
                    // PGD only visits feasible points, so it can never find
                    // fewer robust points than the exact answer.
                    assert!(!grid || robust, "seed {seed} point {p:?}");
                    disagreements += usize::from(robust != grid);
                }
                total += 1;
            }
        }
    }
    assert!(disagreements * 100 <= total, "{disagreements} of {total} points disagree");
}

#[test]
fn attacks_leave_batch_norm_statistics_alone() {
    let arch = ArchSpec::wrn(10, 1, [1, 8, 8], 2);
    let mut model = Model::build(&arch, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::new(vec![8, 1, 8, 8], (0..512).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    // Give the running statistics non-trivial values first.
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), false);
    let pass = model.forward(&mut tape, input, BnMode::Train, false).unwrap();
    model.absorb_bn(&pass.bn_batch);
    let before = model.bn_stats();
    let y = vec![0, 1, 0, 1, 0, 1, 0, 1];
    pgd(&model, &x, &y, &AttackConfig::pgd(EPS, 5), None, 0).unwrap();
    robust_accuracy(&model, &x, &y, &AttackConfig::pgd(EPS, 5), 0).unwrap();
    assert_eq!(model.bn_stats(), before);
}

#[test]
fn attack_flops_are_three_forward_passes_per_step() {
    let arch = ArchSpec::wrn(10, 1, [1, 8, 8], 2);
    let model = Model::build(&arch, 0).unwrap();
    let x = Tensor::full(&[4, 1, 8, 8], 0.5);
    let f = robustlab::models::count_forward_flops(&arch).unwrap();
    for steps in [1, 4] {
        let out = pgd(&model, &x, &[0, 1, 0, 1], &AttackConfig::pgd(EPS, steps), None, 0).unwrap();
        assert_eq!(out.flops.mac, 3 * steps as u64 * 4 * f.mac);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn projection_invariants(
        x in prop::collection::vec(0.0f64..=1.0, 1..16),
        raw in prop::collection::vec(-2.0f64..2.0, 16),
        eps in 0.0f64..0.999,
    ) {
        let mut delta: Vec<f64> = raw[..x.len()].to_vec();
        project(&mut delta, &x, eps);
        for (&xi, &di) in x.iter().zip(&delta) {
            prop_assert!(di.abs() <= eps);
            prop_assert!((0.0..=1.0).contains(&(xi + di)));
        }
        let mut again = delta.clone();
        project(&mut again, &x, eps);
        prop_assert_eq!(again, delta);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pgd_output_is_always_feasible(seed in 0u64..1_000_000, eps in 0.0f64..0.5, steps in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::build(&ArchSpec::mlp(2, 8, [1, 2, 3], 3), seed).unwrap();
        let x = Tensor::new(vec![5, 1, 2, 3], (0..30).map(|i| if i % 7 == 0 { (i % 2) as f64 } else { rng.random_range(0.0..1.0) }).collect()).unwrap();
        let y = labels(5, 3, &mut rng);
        let delta = pgd(&model, &x, &y, &AttackConfig::pgd(eps, steps), None, seed).unwrap().delta;
        for (&xi, &di) in x.data().iter().zip(delta.data()) {
            prop_assert!(di.abs() <= eps);
            prop_assert!((0.0..=1.0).contains(&(xi + di)));
        }
    }
}
