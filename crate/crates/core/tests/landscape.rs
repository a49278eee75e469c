use flatlab_core::harness::verify::{random_spd, report_difference};
use flatlab_core::landscape::{
    gradient_bundle, olm_covariance_closed_form, report_direct, report_fast, report_subsampled,
    GradientBundle,
};
use flatlab_core::models::{make_dataset, DatasetKind, ModelSpec};
use flatlab_core::numerics::{sample_standard_gaussian, RngStream};
use flatlab_core::oracles::mc_noise_covariance;
use proptest::prelude::*;

fn bundle(seed: u64, n: usize, p: usize) -> GradientBundle {
    let rng = &mut RngStream::new(seed);
    let q = sample_standard_gaussian(rng, n, p);
    let e = (0..n).map(|_| rng.gaussian()).collect();
    GradientBundle::from_parts(q, e)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fast_identities_match_direct(seed in any::<u64>(), n in 2usize..40, p in 1usize..60) {
        let b = bundle(seed, n, p);
        let err = report_difference(&report_fast(&b).unwrap(), &report_direct(&b).unwrap());
        prop_assert!(err <= 1e-10, "relative error {err:e}");
    }

    #[test]
    fn mu_splits_and_bounds_hold(seed in any::<u64>(), n in 2usize..40, p in 1usize..60) {
        let r = report_fast(&bundle(seed, n, p)).unwrap();
        let (mu, mu1, mu2) = (r.mu.unwrap(), r.mu1.unwrap(), r.mu2.unwrap());
        prop_assert!((mu - (mu1 - mu2)).abs() <= 1e-10 * mu1.abs().max(1.0));
        prop_assert!(mu1 >= r.gamma * (1.0 - 1e-12));
        prop_assert!(mu2 <= r.tau_g() * (1.0 + 1e-12));
        prop_assert!(r.alpha.unwrap() >= -1e-12 && r.alpha.unwrap() <= 1.0 + 1e-12);
        prop_assert!(r.gamma > 0.0 && r.gamma <= 1.0 + 1e-12);
    }

    #[test]
    fn olm_alignment_is_at_least_one(seed in any::<u64>(), diag in any::<bool>()) {
        let rng = &mut RngStream::new(seed);
        let spec = if diag {
            ModelSpec::DiagonalLinear { dim: 2 + rng.index(4) }
        } else {
            ModelSpec::DeepLinear { input_dim: 2 + rng.index(3), widths: vec![2 + rng.index(3); 1 + rng.index(2)] }
        };
        let cov = random_spd(rng, spec.input_dim());
        let pop = olm_covariance_closed_form(&spec, &spec.init_params(rng), &spec.init_params(rng), &cov).unwrap();
        prop_assert!(pop.mu().unwrap() >= 1.0 - 1e-9);
    }
}

#[test]
fn full_probe_equals_full_report() {
    let rng = &mut RngStream::new(4);
    let spec = ModelSpec::random_feature(rng, 50, 4, 0.25);
    let data = make_dataset(DatasetKind::RfmSynthetic, rng, 30, 4);
    let theta = spec.init_params(rng);
    let full = report_fast(&gradient_bundle(&spec, &theta, &data)).unwrap();
    let probe = report_subsampled(&spec, &theta, &data, 30, rng).unwrap();
    assert_eq!(report_difference(&full, &probe), 0.0);
}

#[test]
fn zero_residuals_are_degenerate() {
    let q = sample_standard_gaussian(&mut RngStream::new(2), 5, 3);
    let b = GradientBundle::from_parts(q, vec![0.0; 5]);
    assert!(report_fast(&b).is_err());
    assert!(report_direct(&b).is_err());
}

#[test]
fn noise_oracle_rejects_the_covariance_without_the_gradient_term() {
    // The closed form passes; dropping ∇L∇Lᵀ must fail by a wide margin, or the
    // oracle has no power.
    let rng = &mut RngStream::new(17);
    let spec = ModelSpec::DiagonalLinear { dim: 3 };
    let cov = random_spd(rng, 3);
    let theta = spec.init_params(rng);
    let star = spec.init_params(rng);
    let pop = olm_covariance_closed_form(&spec, &theta, &star, &cov).unwrap();
    let est = mc_noise_covariance(&spec, &theta, &star, &cov, 100_000, rng).unwrap();
    assert!(est.max_z_score(&pop.sigma) < 5.0);
    let wrong = pop.g.scale(2.0 * pop.loss);
    assert!(est.max_z_score(&wrong) > 10.0);
}
