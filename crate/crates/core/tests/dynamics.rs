use flatlab_core::dynamics::{
    loss_update_prediction, run_ensemble, run_linearized, run_sgd, EnsembleSummary,
    LinearizedProblem, NoiseSpec, Recording, Sampling, SgdConfig, Terminal,
};
use flatlab_core::models::{make_dataset, DatasetKind, ModelSpec, ParamVector};
use flatlab_core::numerics::{sample_standard_gaussian, RngStream};
use flatlab_core::oracles::exhaustive_batch_expectation;
use proptest::prelude::*;

fn problem(seed: u64, n: usize, p: usize) -> (LinearizedProblem, Vec<f64>) {
    let rng = &mut RngStream::new(seed);
    let g = sample_standard_gaussian(rng, n, p);
    let delta = (0..p).map(|_| rng.gaussian()).collect();
    (
        LinearizedProblem::from_gradients(g, ParamVector::zeros(p)),
        delta,
    )
}

fn cfg(eta: f64, b: usize, sampling: Sampling, steps: usize, seed: u64) -> SgdConfig {
    SgdConfig {
        eta,
        batch_size: b,
        sampling,
        max_steps: steps,
        loss_stop: 0.0,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_step_expectation_is_exact(seed in any::<u64>(), n in 1usize..6, p in 1usize..6, b in 1usize..4, u in 0.0f64..1.5, without in any::<bool>()) {
        let (pr, delta) = problem(seed, n, p);
        let sampling = if without { Sampling::WithoutReplacement } else { Sampling::WithReplacement };
        let b = if without { b.min(n) } else { b };
        let eta = u / pr.lambda1_h();
        let exact = exhaustive_batch_expectation(&pr, &delta, eta, b, sampling).unwrap();
        let pred = loss_update_prediction(&pr, &delta, &cfg(eta, b, sampling, 1, 0), NoiseSpec::Minibatch).unwrap();
        let scale = exact.abs().max(pr.loss(&delta));
        prop_assert!((exact - pred.expected_next_loss).abs() <= 1e-12 * scale);
    }

    #[test]
    fn gd_factor_lies_in_unit_interval(seed in any::<u64>(), n in 1usize..20, p in 1usize..20, u in 0.0f64..=1.0) {
        let (pr, delta) = problem(seed, n, p);
        let eta = 2.0 * u / pr.lambda1_h();
        let r = loss_update_prediction(&pr, &delta, &cfg(eta, 1, Sampling::WithReplacement, 1, 0), NoiseSpec::None).unwrap().r;
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&r), "r = {r}");
    }
}

#[test]
fn full_batch_without_replacement_is_gradient_descent() {
    let (pr, delta) = problem(3, 8, 12);
    let a = run_linearized(
        &pr,
        &delta,
        &cfg(0.1, 8, Sampling::WithoutReplacement, 30, 1),
        NoiseSpec::Minibatch,
        Recording::every(1),
    )
    .unwrap();
    let b = run_linearized(
        &pr,
        &delta,
        &cfg(0.1, 8, Sampling::WithoutReplacement, 30, 99),
        NoiseSpec::None,
        Recording::every(1),
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn ensemble_mean_tracks_one_step_prediction() {
    let (pr, delta) = problem(8, 10, 30);
    let eta = 0.5 / pr.lambda1_h();
    let c = cfg(eta, 2, Sampling::WithReplacement, 1, 5);
    let pred = loss_update_prediction(&pr, &delta, &c, NoiseSpec::Minibatch).unwrap();
    let runs = run_ensemble(20_000, 5, |s| {
        run_linearized(
            &pr,
            &delta,
            &SgdConfig {
                seed: s,
                ..c.clone()
            },
            NoiseSpec::Minibatch,
            Recording::every(1),
        )
    })
    .unwrap();
    let sum = EnsembleSummary::from_trajectories(&runs);
    let z = (sum.mean[1] - pred.expected_next_loss) / sum.std_error[1];
    assert!(z.abs() < 4.0, "z = {z}");
}

#[test]
fn ensembles_are_identical_across_thread_counts() {
    let (pr, delta) = problem(2, 10, 20);
    let c = cfg(0.5 / pr.lambda1_h(), 3, Sampling::WithReplacement, 50, 0);
    let go = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                run_ensemble(64, 42, |s| {
                    run_linearized(
                        &pr,
                        &delta,
                        &SgdConfig {
                            seed: s,
                            ..c.clone()
                        },
                        NoiseSpec::GeometryAware,
                        Recording::every(1),
                    )
                })
                .unwrap()
            })
    };
    assert_eq!(go(1), go(4));
}

#[test]
fn sgd_trains_a_small_random_feature_model() {
    let rng = &mut RngStream::new(6);
    let spec = ModelSpec::random_feature(rng, 200, 4, 0.25);
    let data = make_dataset(DatasetKind::RfmSynthetic, rng, 20, 4);
    let theta = ParamVector::zeros(200);
    let c = SgdConfig {
        loss_stop: 1e-4,
        ..cfg(0.02, 4, Sampling::WithReplacement, 200_000, 1)
    };
    let t = run_sgd(&spec, &theta, &data, &c, Recording::every(100)).unwrap();
    assert_eq!(
        t.terminal,
        Terminal::Converged,
        "final loss {}",
        t.final_loss()
    );
}

#[test]
fn large_step_diverges_and_stops() {
    let (pr, delta) = problem(4, 6, 6);
    let t = run_linearized(
        &pr,
        &delta,
        &cfg(
            5.0 / pr.lambda1_h(),
            6,
            Sampling::WithoutReplacement,
            10_000,
            0,
        ),
        NoiseSpec::Minibatch,
        Recording::every(1),
    )
    .unwrap();
    assert_eq!(t.terminal, Terminal::Diverged);
    assert!(t.steps.len() < 10_000);
}

#[test]
fn invalid_configs_are_rejected() {
    let (pr, delta) = problem(4, 3, 3);
    let bad = cfg(0.1, 5, Sampling::WithoutReplacement, 1, 0);
    assert!(run_linearized(&pr, &delta, &bad, NoiseSpec::Minibatch, Recording::every(1)).is_err());
    let bad = cfg(f64::NAN, 1, Sampling::WithReplacement, 1, 0);
    assert!(run_linearized(&pr, &delta, &bad, NoiseSpec::Minibatch, Recording::every(1)).is_err());
}
