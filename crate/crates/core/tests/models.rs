use flatlab_core::models::{
    batch_loss_and_grad, full_loss, make_dataset, Dataset, DatasetKind, ModelSpec, ParamVector,
};
use flatlab_core::numerics::RngStream;
use flatlab_core::oracles::finite_diff_gradient;
use proptest::prelude::*;

fn spec_for(kind: usize, rng: &mut RngStream) -> ModelSpec {
    let d = 2 + rng.index(5);
    match kind {
        0 => {
            let m = 3 + rng.index(20);
            ModelSpec::random_feature(rng, m, d, 1.0 / d as f64)
        }
        1 => ModelSpec::DeepLinear {
            input_dim: d,
            widths: (0..1 + rng.index(3)).map(|_| 1 + rng.index(4)).collect(),
        },
        2 => ModelSpec::DiagonalLinear { dim: d },
        _ => ModelSpec::TwoLayerMlp {
            input_dim: d,
            hidden: 1 + rng.index(8),
        },
    }
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-3);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn analytic_gradients_match_finite_differences(seed in any::<u64>(), kind in 0usize..4) {
        let rng = &mut RngStream::new(seed);
        let spec = spec_for(kind, rng);
        let theta = spec.init_params(rng);
        let x: Vec<f64> = (0..spec.input_dim()).map(|_| rng.gaussian()).collect();
        let analytic = spec.per_sample_grad(&theta, &x);
        let numeric = finite_diff_gradient(&spec, &theta, &x, 1e-6).unwrap();
        prop_assert!(rel_diff(&analytic, &numeric) < 1e-6, "{}", spec.kind_name());
    }

    #[test]
    fn value_and_grad_agree_with_parts(seed in any::<u64>(), kind in 0usize..4) {
        let rng = &mut RngStream::new(seed);
        let spec = spec_for(kind, rng);
        let theta = spec.init_params(rng);
        let x: Vec<f64> = (0..spec.input_dim()).map(|_| rng.gaussian()).collect();
        let mut g = vec![0.0; spec.param_count()];
        let f = spec.value_and_grad_into(&theta, &x, &mut g);
        let want = spec.predict(&theta, &x);
        prop_assert!((f - want).abs() <= 1e-12 * want.abs().max(1.0));
        prop_assert!(rel_diff(&g, &spec.per_sample_grad(&theta, &x)) < 1e-12);
    }

    #[test]
    fn olm_prediction_is_linear_in_input(seed in any::<u64>(), kind in 1usize..3) {
        let rng = &mut RngStream::new(seed);
        let spec = spec_for(kind, rng);
        let theta = spec.init_params(rng);
        let f = spec.end_to_end(&theta);
        let x: Vec<f64> = (0..spec.input_dim()).map(|_| rng.gaussian()).collect();
        let want: f64 = f.iter().zip(&x).map(|(a, b)| a * b).sum();
        prop_assert!((spec.predict(&theta, &x) - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

#[test]
fn full_batch_gradient_is_loss_gradient() {
    let rng = &mut RngStream::new(5);
    let spec = ModelSpec::TwoLayerMlp {
        input_dim: 3,
        hidden: 4,
    };
    let data = make_dataset(DatasetKind::BinarySynthetic, rng, 12, 3);
    let theta = spec.init_params(rng);
    let all: Vec<usize> = (0..data.len()).collect();
    let (loss, grad) = batch_loss_and_grad(&spec, &theta, &data, &all).unwrap();
    assert!((loss - full_loss(&spec, &theta, &data)).abs() < 1e-14);
    let h = 1e-6;
    for (j, &gj) in grad.iter().enumerate() {
        let mut plus = theta.clone();
        plus.0[j] += h;
        let mut minus = theta.clone();
        minus.0[j] -= h;
        let fd = (full_loss(&spec, &plus, &data) - full_loss(&spec, &minus, &data)) / (2.0 * h);
        assert!((fd - gj).abs() < 1e-6 * gj.abs().max(1.0), "param {j}");
    }
}

#[test]
fn dataset_csv_round_trip_is_exact() {
    let data = make_dataset(DatasetKind::RfmSynthetic, &mut RngStream::new(9), 17, 6);
    let text = data.to_csv();
    let back = Dataset::from_csv(text.as_bytes()).unwrap();
    assert_eq!(back.to_csv(), text);
    assert_eq!(back.targets, data.targets);
}

#[test]
fn empty_batch_is_an_error() {
    let spec = ModelSpec::DiagonalLinear { dim: 2 };
    let data = make_dataset(DatasetKind::LinearTeacher, &mut RngStream::new(1), 4, 2);
    assert!(batch_loss_and_grad(&spec, &ParamVector::zeros(4), &data, &[]).is_err());
}
