//! Randomized invariant checks shared by the verify recipes and the test suites.

use rand::RngCore;
use serde::Serialize;

use crate::dynamics::{loss_update_prediction, LinearizedProblem, NoiseSpec, Sampling, SgdConfig};
use crate::kernels::{arccos_kernel, kernel_matrix};
use crate::landscape::{
    gradient_bundle, olm_covariance_closed_form, report_direct, report_fast, GradientBundle,
    LandscapeReport,
};
use crate::models::{make_dataset, DatasetKind, ModelSpec, ParamVector};
use crate::numerics::{sample_sphere, sample_standard_gaussian, sym_eig, DenseMatrix, RngStream};
use crate::oracles::{exhaustive_batch_expectation, mc_noise_covariance};
use crate::stability::curvature_ratio_objective;

use super::HarnessError;

/// Result of one randomized check. `worst` is the largest error for tolerance checks
/// and the smallest margin for inequality checks, as named by `measure`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub violations: usize,
    pub measure: &'static str,
    pub worst: f64,
}

impl CheckOutcome {
    pub const CSV_HEADER: &'static str = "check,cases,violations,measure,worst,passed";

    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:?},{}",
            self.name,
            self.cases,
            self.violations,
            self.measure,
            self.worst,
            self.passed()
        )
    }
}

struct Tally {
    out: CheckOutcome,
    max: bool,
}

impl Tally {
    fn errors(name: &'static str) -> Self {
        Tally {
            out: CheckOutcome {
                name,
                cases: 0,
                violations: 0,
                measure: "max_error",
                worst: 0.0,
            },
            max: true,
        }
    }

    fn margins(name: &'static str) -> Self {
        Tally {
            out: CheckOutcome {
                name,
                cases: 0,
                violations: 0,
                measure: "min_margin",
                worst: f64::INFINITY,
            },
            max: false,
        }
    }

    fn record(&mut self, value: f64, ok: bool) {
        self.out.cases += 1;
        if !ok {
            self.out.violations += 1;
        }
        self.out.worst = if value.is_nan() {
            f64::NAN
        } else if self.max {
            self.out.worst.max(value)
        } else {
            self.out.worst.min(value)
        };
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn opt_err(a: Option<f64>, b: Option<f64>) -> f64 {
    match (a, b) {
        (Some(x), Some(y)) => rel_err(x, y),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    }
}

/// Largest relative difference over every field of two reports.
pub fn report_difference(a: &LandscapeReport, b: &LandscapeReport) -> f64 {
    let mut worst = [
        rel_err(a.loss, b.loss),
        rel_err(a.g_frob, b.g_frob),
        rel_err(a.sigma_frob, b.sigma_frob),
        rel_err(a.trace_g_sigma, b.trace_g_sigma),
        rel_err(a.trace_g_sigma1, b.trace_g_sigma1),
        opt_err(a.alpha, b.alpha),
        opt_err(a.beta, b.beta),
        opt_err(a.mu, b.mu),
        opt_err(a.mu1, b.mu1),
        opt_err(a.mu2, b.mu2),
        rel_err(a.gamma, b.gamma),
        rel_err(a.chi_bar, b.chi_bar),
        rel_err(a.lambda1_g, b.lambda1_g),
        rel_err(a.trace_g, b.trace_g),
        rel_err(a.h_frob, b.h_frob),
        if a.small_loss == b.small_loss {
            0.0
        } else {
            f64::INFINITY
        },
    ]
    .into_iter()
    .fold(0.0, f64::max);
    if a.chi.len() != b.chi.len() {
        return f64::INFINITY;
    }
    for (x, y) in a.chi.iter().zip(&b.chi) {
        worst = worst.max(rel_err(*x, *y));
    }
    worst
}

fn random_bundle(rng: &mut RngStream, max_n: usize, max_p: usize) -> GradientBundle {
    let n = 2 + rng.index(max_n - 1);
    let p = 1 + rng.index(max_p);
    let q = sample_standard_gaussian(rng, n, p);
    let residuals = (0..n).map(|_| rng.gaussian()).collect();
    GradientBundle::from_parts(q, residuals)
}

/// Fast `n×n` identities against direct `p×p` evaluation on random bundles.
pub fn check_fast_path(
    cases: usize,
    max_n: usize,
    max_p: usize,
    tol: f64,
    seed: u64,
) -> Result<CheckOutcome, HarnessError> {
    let root = RngStream::new(seed);
    let mut t = Tally::errors("fast-path-equivalence");
    for k in 0..cases {
        let bundle = random_bundle(&mut root.derive(k as u64), max_n, max_p);
        let fast = report_fast(&bundle)?;
        let direct = report_direct(&bundle)?;
        let err = report_difference(&fast, &direct);
        t.record(err, err <= tol);
    }
    Ok(t.out)
}

/// Random random-feature model, data and parameter point.
fn random_feature_state(rng: &mut RngStream) -> GradientBundle {
    let d = 2 + rng.index(9);
    let m = 5 + rng.index(60);
    let n = 2 + rng.index(30);
    let spec = ModelSpec::random_feature(rng, m, d, 1.0 / d as f64);
    let data = make_dataset(DatasetKind::RfmSynthetic, rng, n, d);
    let scale = 1.0 / (m as f64).sqrt();
    let theta = ParamVector((0..m).map(|_| scale * rng.gaussian()).collect());
    gradient_bundle(&spec, &theta, &data)
}

/// `μ₁ ≥ γ` and `μ₂ ≤ τ(G)` on random random-feature states.
pub fn check_uniformity_lemmas(cases: usize, seed: u64) -> Result<[CheckOutcome; 2], HarnessError> {
    let root = RngStream::new(seed);
    let mut lower = Tally::margins("mu1-above-gamma");
    let mut upper = Tally::margins("mu2-below-tau");
    for k in 0..cases {
        let bundle = random_feature_state(&mut root.derive(k as u64));
        let r = report_fast(&bundle)?;
        let (Some(mu1), Some(mu2)) = (r.mu1, r.mu2) else {
            lower.record(f64::NAN, false);
            upper.record(f64::NAN, false);
            continue;
        };
        let m1 = mu1 - r.gamma;
        lower.record(m1, m1 >= -1e-12 * (1.0 + r.gamma));
        let tau = r.tau_g();
        let m2 = tau - mu2;
        upper.record(m2, m2 >= -1e-12 * (1.0 + tau));
    }
    Ok([lower.out, upper.out])
}

fn random_problem(rng: &mut RngStream, max_n: usize, max_p: usize) -> LinearizedProblem {
    let n = 1 + rng.index(max_n);
    let p = 1 + rng.index(max_p);
    let g = sample_standard_gaussian(rng, n, p);
    LinearizedProblem::from_gradients(g, ParamVector::zeros(p))
}

/// Exhaustive batch enumeration against the one-step expectation `rL + η²ν`,
/// under both sampling schemes.
pub fn check_one_step_expectation(
    cases: usize,
    tol: f64,
    seed: u64,
) -> Result<CheckOutcome, HarnessError> {
    let root = RngStream::new(seed);
    let mut t = Tally::errors("one-step-expectation");
    for k in 0..cases {
        let rng = &mut root.derive(k as u64);
        let problem = random_problem(rng, 6, 8);
        let n = problem.n();
        let delta: Vec<f64> = (0..problem.p()).map(|_| rng.gaussian()).collect();
        if problem.loss(&delta) <= 0.0 {
            continue;
        }
        let eta = rng.uniform() * 2.0 / problem.lambda1_h().max(f64::MIN_POSITIVE);
        for sampling in [Sampling::WithReplacement, Sampling::WithoutReplacement] {
            let b = 1 + rng.index(3.min(n));
            let exact = exhaustive_batch_expectation(&problem, &delta, eta, b, sampling)?;
            let cfg = SgdConfig {
                eta,
                batch_size: b,
                sampling,
                max_steps: 1,
                loss_stop: 0.0,
                seed: 0,
            };
            let pred = loss_update_prediction(&problem, &delta, &cfg, NoiseSpec::Minibatch)?;
            // Scaled by the current loss: near ηλ₁ = 1 the next loss cancels to ~0.
            let scale = exact.abs().max(problem.loss(&delta));
            let err = (exact - pred.expected_next_loss).abs() / scale;
            t.record(err, err <= tol);
        }
    }
    Ok(t.out)
}

/// GD contraction factor `r ∈ [0, 1]` whenever `η ≤ 2/λ₁(H)`.
pub fn check_gd_factor(cases: usize, seed: u64) -> Result<CheckOutcome, HarnessError> {
    let root = RngStream::new(seed);
    let mut t = Tally::margins("gd-factor-in-unit-interval");
    for k in 0..cases {
        let rng = &mut root.derive(k as u64);
        let problem = random_problem(rng, 30, 30);
        let delta: Vec<f64> = (0..problem.p()).map(|_| rng.gaussian()).collect();
        if problem.loss(&delta) <= 0.0 {
            continue;
        }
        // u ∈ (0, 1], so η ∈ (0, 2/λ₁].
        let u = 1.0 - rng.uniform();
        let cfg = SgdConfig {
            eta: u * 2.0 / problem.lambda1_h(),
            batch_size: 1,
            sampling: Sampling::WithReplacement,
            max_steps: 1,
            loss_stop: 0.0,
            seed: 0,
        };
        let r = loss_update_prediction(&problem, &delta, &cfg, NoiseSpec::None)?.r;
        let margin = r.min(1.0 - r);
        t.record(margin, margin >= -1e-12);
    }
    Ok(t.out)
}

/// `g(a, b, θ) ≥ −a²/(4b)` for random `a, b > 0`, PSD `H` and `θ`.
pub fn check_curvature_ratio_bound(cases: usize, seed: u64) -> Result<CheckOutcome, HarnessError> {
    let root = RngStream::new(seed);
    let mut t = Tally::margins("curvature-ratio-lower-bound");
    for k in 0..cases {
        let rng = &mut root.derive(k as u64);
        let problem = random_problem(rng, 20, 20);
        let theta: Vec<f64> = (0..problem.p()).map(|_| rng.gaussian()).collect();
        let a = 10f64.powf(4.0 * rng.uniform() - 2.0);
        let b = 10f64.powf(4.0 * rng.uniform() - 2.0);
        let Some(g) = curvature_ratio_objective(|v| problem.h_apply(v), &theta, a, b) else {
            continue;
        };
        let bound = -a * a / (4.0 * b);
        let margin = (g - bound) / (bound.abs() + g.abs()).max(f64::MIN_POSITIVE);
        t.record(margin, margin >= -1e-12);
    }
    Ok(t.out)
}

/// `κ(1) = 1/2`, `κ(0) = 1/(2π)`, `κ(−1) = 0`, and PSD kernel matrices on random sphere points.
pub fn check_kernel_basics(cases: usize, seed: u64) -> Result<[CheckOutcome; 2], HarnessError> {
    let mut boundary = Tally::errors("kernel-boundary-values");
    for (z, want) in [
        (1.0, 0.5),
        (0.0, 1.0 / (2.0 * std::f64::consts::PI)),
        (-1.0, 0.0),
    ] {
        let err = (arccos_kernel(z)? - want).abs();
        boundary.record(err, err <= 1e-15);
    }
    let root = RngStream::new(seed);
    let mut psd = Tally::margins("kernel-matrix-psd");
    for k in 0..cases {
        let rng = &mut root.derive(k as u64);
        let d = 2 + rng.index(15);
        let n = 2 + rng.index(40);
        let pts = sample_sphere(rng, 1.0, d, n)?;
        let km = kernel_matrix(&pts)?;
        let eig = sym_eig(&km)?;
        let min = *eig.eigenvalues.last().expect("nonempty");
        psd.record(min, min >= -1e-12 * eig.lambda_max().max(1.0));
    }
    Ok([boundary.out, psd.out])
}

/// Monte-Carlo noise covariance of a random OLM configuration against the closed form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OlmCase {
    pub config_id: usize,
    pub kind: &'static str,
    pub params: usize,
    pub max_z: f64,
    pub mu: f64,
    pub passed: bool,
}

impl OlmCase {
    pub const CSV_HEADER: &'static str = "config_id,kind,params,max_z,mu,passed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:?},{:?},{}",
            self.config_id, self.kind, self.params, self.max_z, self.mu, self.passed
        )
    }
}

/// Random SPD matrix `AAᵀ/d + 0.1·I`.
pub fn random_spd(rng: &mut RngStream, d: usize) -> DenseMatrix {
    let a = sample_standard_gaussian(rng, d, d);
    let mut s = a.gram_rows().scale(1.0 / d as f64);
    for i in 0..d {
        s[(i, i)] += 0.1;
    }
    s
}

/// Alternates deep-linear and diagonal-linear configurations with small random shapes.
pub fn check_olm_covariance(
    cases: usize,
    samples: usize,
    z_max: f64,
    seed: u64,
) -> Result<Vec<OlmCase>, HarnessError> {
    let root = RngStream::new(seed);
    (0..cases)
        .map(|k| {
            let rng = &mut root.derive(k as u64);
            let spec = if k % 2 == 0 {
                let d = 2 + rng.index(2);
                let depth = 1 + rng.index(2);
                let widths = (0..depth).map(|_| 2 + rng.index(2)).collect();
                ModelSpec::DeepLinear {
                    input_dim: d,
                    widths,
                }
            } else {
                ModelSpec::DiagonalLinear {
                    dim: 2 + rng.index(3),
                }
            };
            let d = spec.input_dim();
            let cov = random_spd(rng, d);
            let theta = spec.init_params(rng);
            let theta_star = spec.init_params(rng);
            let pop = olm_covariance_closed_form(&spec, &theta, &theta_star, &cov)?;
            let mut mc_rng = RngStream::new(rng.next_u64());
            let est = mc_noise_covariance(&spec, &theta, &theta_star, &cov, samples, &mut mc_rng)?;
            let max_z = est.max_z_score(&pop.sigma);
            let mu = pop.mu().unwrap_or(f64::NAN);
            Ok(OlmCase {
                config_id: k,
                kind: spec.kind_name(),
                params: spec.param_count(),
                max_z,
                mu,
                passed: max_z <= z_max && mu >= 1.0 - 1e-9,
            })
        })
        .collect()
}

/// Every invariant suite at `cases` random cases each.
pub fn lemma_suite(cases: usize, seed: u64) -> Result<Vec<CheckOutcome>, HarnessError> {
    let root = RngStream::new(seed);
    let s = |k: u64| root.derive(k).seed();
    let mut out = vec![
        check_fast_path(cases, 100, 200, 1e-10, s(0))?,
        check_one_step_expectation(cases, 1e-12, s(2))?,
        check_gd_factor(cases, s(3))?,
        check_curvature_ratio_bound(cases, s(4))?,
    ];
    out.extend(check_uniformity_lemmas(cases, s(1))?);
    out.extend(check_kernel_basics(cases, s(5))?);
    Ok(out)
}
