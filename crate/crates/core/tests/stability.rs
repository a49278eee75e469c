use flatlab_core::dynamics::{
    loss_update_prediction, LinearizedProblem, NoiseSpec, Sampling, SgdConfig,
};
use flatlab_core::models::ParamVector;
use flatlab_core::numerics::{sample_standard_gaussian, RngStream};
use flatlab_core::stability::{compute_bounds, curvature_ratio_objective, fit_escape_rate};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn curvature_ratio_is_bounded_below(seed in any::<u64>(), n in 1usize..15, p in 1usize..15, la in -3.0f64..3.0, lb in -3.0f64..3.0) {
        let rng = &mut RngStream::new(seed);
        let pr = LinearizedProblem::from_gradients(sample_standard_gaussian(rng, n, p), ParamVector::zeros(p));
        let theta: Vec<f64> = (0..p).map(|_| rng.gaussian()).collect();
        let (a, b) = (10f64.powf(la), 10f64.powf(lb));
        if let Some(g) = curvature_ratio_objective(|v| pr.h_apply(v), &theta, a, b) {
            let bound = -a * a / (4.0 * b);
            prop_assert!(g >= bound - 1e-12 * (bound.abs() + g.abs()));
        }
    }

    #[test]
    fn bounds_scale_inversely_with_eta(eta in 1e-4f64..1.0, b in 1usize..64, mu in 0.05f64..5.0) {
        let x = compute_bounds(eta, b, mu, mu, 100, 10.0, 50.0, 5.0).unwrap();
        let y = compute_bounds(2.0 * eta, b, mu, mu, 100, 10.0, 50.0, 5.0).unwrap();
        prop_assert!((x.sgd_bound - 2.0 * y.sgd_bound).abs() <= 1e-12 * x.sgd_bound);
        prop_assert!((x.gd_bound_lambda1 - 2.0 * y.gd_bound_lambda1).abs() <= 1e-12 * x.gd_bound_lambda1);
        prop_assert!((y.gamma0 - 4.0 * x.gamma0).abs() <= 1e-12 * y.gamma0);
    }
}

/// Above the flatness bound the noise term alone must outgrow the loss: with
/// `ν ≥ μ₀L‖H‖²/B`, `η²ν/L ≥ η²μ₀‖H‖²/B > 1`.
#[test]
fn noise_term_exceeds_loss_above_bound() {
    let rng = &mut RngStream::new(21);
    let pr = LinearizedProblem::from_gradients(
        sample_standard_gaussian(rng, 12, 40),
        ParamVector::zeros(40),
    );
    let delta: Vec<f64> = (0..40).map(|_| rng.gaussian()).collect();
    let mu = pr.mu(&delta).unwrap();
    let b = 2;
    let bound = compute_bounds(
        1.0,
        b,
        mu,
        mu,
        40,
        pr.h_frob(),
        pr.trace_h(),
        pr.lambda1_h(),
    )
    .unwrap();
    let eta = 1.2 * bound.sgd_bound / pr.h_frob();
    let c = SgdConfig {
        eta,
        batch_size: b,
        sampling: Sampling::WithReplacement,
        max_steps: 1,
        loss_stop: 0.0,
        seed: 0,
    };
    let u = loss_update_prediction(&pr, &delta, &c, NoiseSpec::Minibatch).unwrap();
    assert!(
        eta * eta * u.nu / u.loss > 1.0 + 1e-9,
        "{}",
        eta * eta * u.nu / u.loss
    );
}

#[test]
fn exact_geometric_series_fits_exactly() {
    let series: Vec<f64> = (0..20).map(|t| 1e-6 * 1.7f64.powi(t)).collect();
    let f = fit_escape_rate(&series, 0..20).unwrap();
    assert!((f.rate - 1.7).abs() < 1e-12);
    assert!(f.r2 > 1.0 - 1e-12);
    assert!(fit_escape_rate(&series, 0..3).is_err());
}
