//! Mini-batch SGD, linearized SGD around a reference point, and SGD driven by
//! injected Gaussian noise.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::borrow::Cow;

use crate::landscape::{
    fmt_f64, gradient_bundle, report_from_gram_cached, LandscapeError, LandscapeReport,
};
use crate::models::{Dataset, ModelError, ModelSpec, ParamVector};
use crate::numerics::{axpy, dot, sym_eig, DenseMatrix, RngStream};

/// Loss above which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid SGD configuration: {0}")]
    InvalidConfig(String),
    #[error(
        "pretraining stopped after {steps} steps at loss {loss:e} above the target {target:e}"
    )]
    PretrainFailed {
        steps: usize,
        loss: f64,
        target: f64,
    },
    #[error("displacement is zero or lies in the null space of H")]
    ZeroDisplacement,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Landscape(#[from] LandscapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    WithReplacement,
    WithoutReplacement,
}

impl Sampling {
    /// Multiplier turning `Σ` into the covariance of the batch-mean gradient.
    pub fn covariance_factor(self, n: usize, b: usize) -> f64 {
        match self {
            Sampling::WithReplacement => 1.0 / b as f64,
            Sampling::WithoutReplacement => {
                if n <= 1 {
                    0.0
                } else {
                    (n - b) as f64 / (b as f64 * (n - 1) as f64)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub eta: f64,
    pub batch_size: usize,
    pub sampling: Sampling,
    pub max_steps: usize,
    /// Stop once the full loss is at or below this value; `0` disables.
    pub loss_stop: f64,
    pub seed: u64,
}

impl SgdConfig {
    pub fn validate(&self, n: usize) -> Result<(), DynamicsError> {
        let bad = |m: String| Err(DynamicsError::InvalidConfig(m));
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return bad(format!(
                "eta must be finite and non-negative, got {}",
                self.eta
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.sampling == Sampling::WithoutReplacement && self.batch_size > n {
            return bad(format!(
                "batch size {} exceeds {} samples without replacement",
                self.batch_size, n
            ));
        }
        if !(self.loss_stop >= 0.0) {
            return bad("loss_stop must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseSpec {
    /// Mini-batch sampling noise.
    Minibatch,
    /// Gaussian noise with covariance `2L·H/B`.
    GeometryAware,
    /// Gaussian noise with covariance `2σ²L·I/B`; `σ² = tr(H)/p` when unset.
    Isotropic { sigma2: Option<f64> },
    /// Geometry-aware noise scaled by `min(1, cap/ν)` with `ν = L‖H‖²/B`, so that
    /// `tr(H·S)/2 ≤ cap` at every step.
    ClampedGeometryAware { cap: f64 },
    /// Full-batch gradient descent.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Terminal {
    Converged,
    MaxSteps,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportMode {
    Off,
    /// Landscape statistics on all samples.
    Full,
    /// Landscape statistics on a fresh random probe of this many samples.
    Probe(usize),
}

/// When to record, and what.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Recording {
    /// The full loss (and stop conditions) are evaluated every `every` steps.
    pub every: usize,
    pub reports: ReportMode,
}

impl Recording {
    pub fn every(every: usize) -> Self {
        Self {
            every,
            reports: ReportMode::Off,
        }
    }

    pub fn with_reports(every: usize, reports: ReportMode) -> Self {
        Self { every, reports }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: usize,
    pub loss: f64,
    pub report: Option<LandscapeReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub terminal: Terminal,
    /// Final parameters (`θ`) or displacement (`δ`) for linearized runs.
    pub final_state: Vec<f64>,
}

impl Trajectory {
    pub fn final_loss(&self) -> f64 {
        self.steps.last().map(|s| s.loss).unwrap_or(f64::NAN)
    }

    pub fn reports(&self) -> impl Iterator<Item = (usize, &LandscapeReport)> {
        self.steps
            .iter()
            .filter_map(|s| s.report.as_ref().map(|r| (s.t, r)))
    }

    /// Recorded reports violating `μ₁ ≥ γ` beyond rounding.
    pub fn uniformity_violations(&self) -> usize {
        self.reports()
            .filter(|(_, r)| r.mu1.is_some_and(|m| m < r.gamma * (1.0 - 1e-9)))
            .count()
    }

    pub const CSV_HEADER: &'static str = "t,loss";
    pub const CSV_REPORT_HEADER: &'static str = "t,loss,alpha,beta,mu,mu1,mu2,gamma,h_frob";

    /// CSV body (no header). Report columns are appended when `with_reports`;
    /// a leading `run_id` column is added when given.
    pub fn csv_rows(&self, run_id: Option<usize>, with_reports: bool, out: &mut String) {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for s in &self.steps {
            if let Some(id) = run_id {
                let _ = write!(out, "{id},");
            }
            let _ = write!(out, "{},{}", s.t, fmt_f64(s.loss));
            if with_reports {
                match &s.report {
                    Some(r) => {
                        let _ = write!(
                            out,
                            ",{},{},{},{},{},{},{}",
                            opt(r.alpha),
                            opt(r.beta),
                            opt(r.mu),
                            opt(r.mu1),
                            opt(r.mu2),
                            fmt_f64(r.gamma),
                            fmt_f64(r.h_frob)
                        );
                    }
                    None => out.push_str(",,,,,,,"),
                }
            }
            out.push('\n');
        }
    }

    pub fn csv_header(run_id: bool, with_reports: bool) -> String {
        let base = if with_reports {
            Self::CSV_REPORT_HEADER
        } else {
            Self::CSV_HEADER
        };
        if run_id {
            format!("run_id,{base}")
        } else {
            base.to_string()
        }
    }
}

/// Ensemble mean and standard error at each recorded step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub t: Vec<usize>,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub runs: usize,
}

impl EnsembleSummary {
    /// Aligns runs on their recorded steps. A run that stopped early contributes its
    /// last recorded loss to later steps.
    pub fn from_trajectories(runs: &[Trajectory]) -> Self {
        let longest = runs
            .iter()
            .max_by_key(|r| r.steps.len())
            .map(|r| r.steps.iter().map(|s| s.t).collect::<Vec<_>>())
            .unwrap_or_default();
        let k = runs.len() as f64;
        let mut mean = Vec::with_capacity(longest.len());
        let mut se = Vec::with_capacity(longest.len());
        for idx in 0..longest.len() {
            let vals: Vec<f64> = runs
                .iter()
                .map(|r| {
                    r.steps
                        .get(idx)
                        .or(r.steps.last())
                        .map_or(f64::NAN, |s| s.loss)
                })
                .collect();
            let m = vals.iter().sum::<f64>() / k;
            let var = if runs.len() > 1 {
                vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1.0)
            } else {
                0.0
            };
            mean.push(m);
            se.push((var / k).sqrt());
        }
        Self {
            t: longest,
            mean,
            std_error: se,
            runs: runs.len(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,mean_loss,std_error\n");
        for i in 0..self.t.len() {
            let _ = writeln!(
                s,
                "{},{},{}",
                self.t[i],
                fmt_f64(self.mean[i]),
                fmt_f64(self.std_error[i])
            );
        }
        s
    }
}

/// Draws one batch. `B = n` without replacement returns `0..n` in order so the
/// step coincides with full-batch gradient descent.
pub fn draw_batch(rng: &mut RngStream, n: usize, b: usize, sampling: Sampling) -> Vec<usize> {
    match sampling {
        Sampling::WithoutReplacement if b == n => (0..n).collect(),
        Sampling::WithoutReplacement => rng.sample_without_replacement(n, b),
        Sampling::WithReplacement => (0..b).map(|_| rng.index(n)).collect(),
    }
}

/// Per-sample value and gradient; feature models reuse a cached feature matrix.
enum Evaluator<'a> {
    Features(DenseMatrix),
    General(&'a ModelSpec),
}

impl Evaluator<'_> {
    fn value_and_grad(&self, theta: &ParamVector, data: &Dataset, i: usize, g: &mut [f64]) -> f64 {
        match self {
            Evaluator::Features(phi) => {
                g.copy_from_slice(phi.row(i));
                dot(phi.row(i), theta.as_slice())
            }
            Evaluator::General(spec) => spec.value_and_grad_into(theta, data.input(i), g),
        }
    }

    fn full_loss(&self, theta: &ParamVector, data: &Dataset) -> f64 {
        let n = data.len();
        let sum: f64 = match self {
            Evaluator::Features(phi) => (0..n)
                .map(|i| {
                    let e = dot(phi.row(i), theta.as_slice()) - data.targets[i];
                    e * e
                })
                .sum(),
            Evaluator::General(spec) => (0..n)
                .map(|i| {
                    let e = spec.predict(theta, data.input(i)) - data.targets[i];
                    e * e
                })
                .sum(),
        };
        0.5 * sum / n as f64
    }

    fn gram_source<'c>(
        &self,
        cache: &'c Option<(DenseMatrix, f64)>,
        theta: &ParamVector,
        data: &Dataset,
        idx: Option<&[usize]>,
    ) -> GramSource<'c> {
        match (self, cache) {
            (Evaluator::Features(phi), Some((k, l1))) => {
                let resid = |i: usize| dot(phi.row(i), theta.as_slice()) - data.targets[i];
                match idx {
                    None => GramSource {
                        gram: Cow::Borrowed(k),
                        residuals: (0..data.len()).map(resid).collect(),
                        lambda1: Some(*l1),
                    },
                    Some(ix) => GramSource {
                        gram: Cow::Owned(DenseMatrix::from_fn(ix.len(), ix.len(), |a, b| {
                            k[(ix[a], ix[b])]
                        })),
                        residuals: ix.iter().map(|&i| resid(i)).collect(),
                        lambda1: None,
                    },
                }
            }
            _ => {
                let spec = match self {
                    Evaluator::General(spec) => spec,
                    Evaluator::Features(_) => unreachable!("feature evaluators carry a cache"),
                };
                let b = match idx {
                    Some(ix) => gradient_bundle(spec, theta, &data.subset(ix)),
                    None => gradient_bundle(spec, theta, data),
                };
                GramSource {
                    gram: Cow::Owned(b.q.gram_rows()),
                    residuals: b.residuals,
                    lambda1: None,
                }
            }
        }
    }
}

/// What a landscape report needs: Gram matrix, residuals and optionally `λ₁(K)`.
struct GramSource<'a> {
    gram: Cow<'a, DenseMatrix>,
    residuals: Vec<f64>,
    lambda1: Option<f64>,
}

fn feature_matrix(spec: &ModelSpec, data: &Dataset) -> DenseMatrix {
    let p = spec.param_count();
    let zero = ParamVector::zeros(p);
    let rows: Vec<Vec<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| spec.per_sample_grad(&zero, data.input(i)))
        .collect();
    DenseMatrix::from_vec(data.len(), p, rows.concat()).expect("feature shape")
}

fn make_report<'a>(
    mode: ReportMode,
    probe_rng: &mut RngStream,
    n: usize,
    build: impl FnOnce(Option<&[usize]>) -> GramSource<'a>,
) -> Result<Option<LandscapeReport>, DynamicsError> {
    let src = match mode {
        ReportMode::Off => return Ok(None),
        ReportMode::Full => build(None),
        ReportMode::Probe(k) if k >= n => build(None),
        ReportMode::Probe(k) => {
            let idx = probe_rng.sample_without_replacement(n, k);
            build(Some(&idx))
        }
    };
    match report_from_gram_cached(&src.gram, &src.residuals, src.lambda1) {
        Ok(r) => Ok(Some(r)),
        Err(LandscapeError::DegenerateGram { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn is_record_step(t: usize, every: usize) -> bool {
    t.is_multiple_of(every)
}

/// Mini-batch SGD `θ ← θ − (η/B) Σ_{i∈I} (f(xᵢ)−yᵢ)∇f(xᵢ)`.
///
/// The full loss and the stop conditions are evaluated at recorded steps only.
pub fn run_sgd(
    spec: &ModelSpec,
    theta0: &ParamVector,
    data: &Dataset,
    cfg: &SgdConfig,
    recording: Recording,
) -> Result<Trajectory, DynamicsError> {
    cfg.validate(data.len())?;
    if recording.every == 0 {
        return Err(DynamicsError::InvalidConfig(
            "record_every must be >= 1".into(),
        ));
    }
    let eval = if spec.is_linear_in_params() {
        Evaluator::Features(feature_matrix(spec, data))
    } else {
        Evaluator::General(spec)
    };
    let gram_cache = match (&eval, recording.reports) {
        (Evaluator::Features(phi), ReportMode::Full | ReportMode::Probe(_)) => {
            let k = phi.gram_rows();
            let l1 = sym_eig(&k).map_err(LandscapeError::from)?.lambda_max();
            Some((k, l1))
        }
        _ => None,
    };
    let root = RngStream::new(cfg.seed);
    let mut batch_rng = root.derive(0);
    let mut probe_rng = root.derive(1);
    let n = data.len();
    let p = spec.param_count();
    let mut theta = theta0.clone();
    let mut g = vec![0.0; p];
    let mut step_dir = vec![0.0; p];
    let mut steps = Vec::new();
    let mut terminal = Terminal::MaxSteps;
    let scale = cfg.eta / cfg.batch_size as f64;

    for t in 0..=cfg.max_steps {
        if is_record_step(t, recording.every) || t == cfg.max_steps {
            let loss = eval.full_loss(&theta, data);
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                steps.push(TrajectoryStep {
                    t,
                    loss,
                    report: None,
                });
                terminal = Terminal::Diverged;
                break;
            }
            let report = make_report(recording.reports, &mut probe_rng, n, |ix| {
                eval.gram_source(&gram_cache, &theta, data, ix)
            })?;
            steps.push(TrajectoryStep { t, loss, report });
            if loss <= cfg.loss_stop {
                terminal = Terminal::Converged;
                break;
            }
        }
        if t == cfg.max_steps {
            break;
        }
        step_dir.iter_mut().for_each(|v| *v = 0.0);
        for i in draw_batch(&mut batch_rng, n, cfg.batch_size, cfg.sampling) {
            let f = eval.value_and_grad(&theta, data, i, &mut g);
            axpy(f - data.targets[i], &g, &mut step_dir);
        }
        axpy(-scale, &step_dir, theta.as_mut_slice());
    }
    Ok(Trajectory {
        steps,
        terminal,
        final_state: theta.0,
    })
}

/// Quadratic model around `θ*`: residual of sample `i` at displacement `δ` is `gᵢᵀδ`.
#[derive(Debug, Clone)]
pub struct LinearizedProblem {
    /// n×p, row `i` is `gᵢ = ∇f(xᵢ;θ*)`.
    pub g: DenseMatrix,
    pub theta_star: ParamVector,
    /// n×n Gram matrix `gᵢᵀgⱼ`.
    gram: DenseMatrix,
    h_frob_sq: f64,
    trace_h: f64,
    lambda1_h: f64,
}

impl LinearizedProblem {
    pub fn from_gradients(g: DenseMatrix, theta_star: ParamVector) -> Self {
        assert_eq!(g.cols(), theta_star.len(), "gradient width must equal p");
        let n = g.rows() as f64;
        let gram = g.gram_rows();
        let h_frob_sq = gram.as_slice().iter().map(|v| v * v).sum::<f64>() / (n * n);
        let trace_h = gram.trace() / n;
        let lambda1_h = sym_eig(&gram)
            .expect("Gram matrix is symmetric")
            .lambda_max()
            / n;
        Self {
            g,
            theta_star,
            gram,
            h_frob_sq,
            trace_h,
            lambda1_h,
        }
    }

    pub fn n(&self) -> usize {
        self.g.rows()
    }

    pub fn p(&self) -> usize {
        self.g.cols()
    }

    pub fn gram(&self) -> &DenseMatrix {
        &self.gram
    }

    pub fn h_frob(&self) -> f64 {
        self.h_frob_sq.sqrt()
    }

    pub fn trace_h(&self) -> f64 {
        self.trace_h
    }

    pub fn lambda1_h(&self) -> f64 {
        self.lambda1_h
    }

    /// Residuals `e = Gδ`.
    pub fn residuals(&self, delta: &[f64]) -> Vec<f64> {
        self.g.mat_vec(delta)
    }

    pub fn loss(&self, delta: &[f64]) -> f64 {
        let e = self.residuals(delta);
        0.5 * dot(&e, &e) / self.n() as f64
    }

    /// `Hv = (1/n) Gᵀ(Gv)`.
    pub fn h_apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.g.tr_mat_vec(&self.g.mat_vec(v));
        let inv = 1.0 / self.n() as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        out
    }

    /// Explicit p×p Hessian; for tests and small problems.
    pub fn hessian(&self) -> DenseMatrix {
        self.g
            .transpose()
            .matmul(&self.g)
            .expect("shapes agree")
            .scale(1.0 / self.n() as f64)
    }

    /// `μ(δ) = tr(GΣ)/(2L‖G‖²)` from the cached Gram matrix in O(n²).
    pub fn mu(&self, delta: &[f64]) -> Option<f64> {
        let e = self.residuals(delta);
        let n = self.n();
        let nf = n as f64;
        let loss = 0.5 * dot(&e, &e) / nf;
        if loss < crate::landscape::DEGENERATE_LOSS {
            return None;
        }
        let mut tr = 0.0;
        for j in 0..n {
            let col_mean = (0..n).map(|i| e[i] * self.gram[(i, j)]).sum::<f64>() / nf;
            tr += (0..n)
                .map(|i| (e[i] * self.gram[(i, j)] - col_mean).powi(2))
                .sum::<f64>();
        }
        tr /= nf * nf;
        Some(tr / (2.0 * loss * self.h_frob_sq))
    }

    fn gram_source(&self, delta: &[f64], idx: Option<&[usize]>) -> GramSource<'_> {
        match idx {
            None => GramSource {
                gram: Cow::Borrowed(&self.gram),
                residuals: self.residuals(delta),
                lambda1: Some(self.lambda1_h * self.n() as f64),
            },
            Some(ix) => GramSource {
                gram: Cow::Owned(DenseMatrix::from_fn(ix.len(), ix.len(), |a, b| {
                    self.gram[(ix[a], ix[b])]
                })),
                residuals: ix.iter().map(|&i| dot(self.g.row(i), delta)).collect(),
                lambda1: None,
            },
        }
    }
}

pub fn build_linearized(
    spec: &ModelSpec,
    theta_star: &ParamVector,
    data: &Dataset,
) -> LinearizedProblem {
    let bundle = gradient_bundle(spec, theta_star, data);
    LinearizedProblem::from_gradients(bundle.q, theta_star.clone())
}

/// One-step prediction `E[L(δ⁺)] = r·L + η²ν` for the linearized dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossUpdate {
    pub r: f64,
    pub nu: f64,
    pub loss: f64,
    pub expected_next_loss: f64,
}

pub fn loss_update_prediction(
    problem: &LinearizedProblem,
    delta: &[f64],
    cfg: &SgdConfig,
    noise: NoiseSpec,
) -> Result<LossUpdate, DynamicsError> {
    let n = problem.n();
    let nf = n as f64;
    let eta = cfg.eta;
    let b = cfg.batch_size as f64;
    let e = problem.residuals(delta);
    let quad = dot(&e, &e) / nf; // δᵀHδ
    if quad <= 0.0 {
        return Err(DynamicsError::ZeroDisplacement);
    }
    let loss = 0.5 * quad;
    let h1 = problem.h_apply(delta);
    let h2 = problem.h_apply(&h1);
    let h1h1 = dot(&h1, &h1);
    let h1h2 = dot(&h1, &h2);
    let r = 1.0 - 2.0 * eta * h1h1 / quad + eta * eta * h1h2 / quad;
    let nu = match noise {
        NoiseSpec::None => 0.0,
        NoiseSpec::Minibatch => {
            // tr(HΣ) = (1/n)Σᵢ eᵢ² gᵢᵀHgᵢ − ∇LᵀH∇L with gᵢᵀHgᵢ = (1/n)Σⱼ(gᵢᵀgⱼ)².
            let k = problem.gram();
            let second: f64 = (0..n)
                .map(|i| {
                    let row = k.row(i);
                    e[i] * e[i] * dot(row, row) / nf
                })
                .sum::<f64>()
                / nf;
            let tr_h_sigma = second - h1h2;
            0.5 * tr_h_sigma * cfg.sampling.covariance_factor(n, cfg.batch_size)
        }
        NoiseSpec::GeometryAware => loss * problem.h_frob_sq / b,
        NoiseSpec::Isotropic { sigma2 } => {
            let s2 = sigma2.unwrap_or(problem.trace_h / problem.p() as f64);
            s2 * loss * problem.trace_h / b
        }
        NoiseSpec::ClampedGeometryAware { cap } => {
            let nu = loss * problem.h_frob_sq / b;
            nu.min(cap)
        }
    };
    Ok(LossUpdate {
        r,
        nu,
        loss,
        expected_next_loss: r * loss + eta * eta * nu,
    })
}

/// Linearized SGD from `δ₀`.
///
/// `Minibatch`: `δ ← δ − (η/B) Σ_{i∈I}(gᵢᵀδ)gᵢ`. Gaussian kinds: `δ ← δ − η(Hδ + ξ)`
/// with `ξ` drawn from the noise covariance at the current loss. `None`: the full
/// batch in index order, so it matches `Minibatch` with `B = n` without replacement.
pub fn run_linearized(
    problem: &LinearizedProblem,
    delta0: &[f64],
    cfg: &SgdConfig,
    noise: NoiseSpec,
    recording: Recording,
) -> Result<Trajectory, DynamicsError> {
    let n = problem.n();
    let p = problem.p();
    if noise == NoiseSpec::Minibatch {
        cfg.validate(n)?;
    } else {
        SgdConfig {
            batch_size: cfg.batch_size.max(1),
            sampling: Sampling::WithReplacement,
            ..cfg.clone()
        }
        .validate(n)?;
    }
    if recording.every == 0 {
        return Err(DynamicsError::InvalidConfig(
            "record_every must be >= 1".into(),
        ));
    }
    assert_eq!(delta0.len(), p, "displacement length");
    let root = RngStream::new(cfg.seed);
    let mut rng = root.derive(0);
    let mut probe_rng = root.derive(1);
    let nf = n as f64;
    let b = cfg.batch_size as f64;
    let eta = cfg.eta;
    let sigma2_default = problem.trace_h / p as f64;

    let mut delta = delta0.to_vec();
    let mut steps = Vec::new();
    let mut terminal = Terminal::MaxSteps;
    let mut dir = vec![0.0; p];
    let mut e = problem.residuals(&delta);

    for t in 0..=cfg.max_steps {
        let loss = 0.5 * dot(&e, &e) / nf;
        if is_record_step(t, recording.every) || t == cfg.max_steps {
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                steps.push(TrajectoryStep {
                    t,
                    loss,
                    report: None,
                });
                terminal = Terminal::Diverged;
                break;
            }
            let report = make_report(recording.reports, &mut probe_rng, n, |ix| {
                problem.gram_source(&delta, ix)
            })?;
            steps.push(TrajectoryStep { t, loss, report });
            if loss <= cfg.loss_stop {
                terminal = Terminal::Converged;
                break;
            }
        }
        if t == cfg.max_steps {
            break;
        }
        dir.iter_mut().for_each(|v| *v = 0.0);
        match noise {
            NoiseSpec::Minibatch | NoiseSpec::None => {
                let (batch, bsize) = if noise == NoiseSpec::None {
                    ((0..n).collect::<Vec<_>>(), n)
                } else {
                    (
                        draw_batch(&mut rng, n, cfg.batch_size, cfg.sampling),
                        cfg.batch_size,
                    )
                };
                for i in batch {
                    axpy(e[i], problem.g.row(i), &mut dir);
                }
                axpy(-eta / bsize as f64, &dir, &mut delta);
            }
            NoiseSpec::GeometryAware | NoiseSpec::ClampedGeometryAware { .. } => {
                // ξ = c·Gᵀz with z ∼ N(0, I_n) has covariance c²·n·H.
                let mut var = 2.0 * loss / b;
                if let NoiseSpec::ClampedGeometryAware { cap } = noise {
                    let nu = loss * problem.h_frob_sq / b;
                    if nu > cap {
                        var *= cap / nu;
                    }
                }
                let c = (var / nf).sqrt();
                let coeff: Vec<f64> = e.iter().map(|ei| ei / nf + c * rng.gaussian()).collect();
                let step = problem.g.tr_mat_vec(&coeff);
                axpy(-eta, &step, &mut delta);
            }
            NoiseSpec::Isotropic { sigma2 } => {
                let s2 = sigma2.unwrap_or(sigma2_default);
                let c = (2.0 * s2 * loss / b).sqrt();
                let inv = 1.0 / nf;
                let grad = problem.g.tr_mat_vec(&e);
                for (d, gj) in delta.iter_mut().zip(&grad) {
                    *d -= eta * (gj * inv + c * rng.gaussian());
                }
            }
        }
        e = problem.residuals(&delta);
    }
    Ok(Trajectory {
        steps,
        terminal,
        final_state: delta,
    })
}

/// Runs `count` independent trajectories with seeds derived from `master_seed`.
/// Results are in run order regardless of scheduling.
pub fn run_ensemble<F>(
    count: usize,
    master_seed: u64,
    run: F,
) -> Result<Vec<Trajectory>, DynamicsError>
where
    F: Fn(u64) -> Result<Trajectory, DynamicsError> + Sync,
{
    let root = RngStream::new(master_seed);
    (0..count)
        .into_par_iter()
        .map(|k| run(root.derive(k as u64).seed()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct EscapeResult {
    pub pretrain: Trajectory,
    pub minimum: ParamVector,
    pub runs: Vec<Trajectory>,
    pub summary: EnsembleSummary,
}

/// Trains to a minimum with `pretrain`, then forks `ensemble` runs of `switch` from it.
pub fn escape_experiment(
    spec: &ModelSpec,
    data: &Dataset,
    theta0: &ParamVector,
    pretrain: &SgdConfig,
    switch: &SgdConfig,
    ensemble: usize,
    recording: Recording,
) -> Result<EscapeResult, DynamicsError> {
    let pre = run_sgd(
        spec,
        theta0,
        data,
        pretrain,
        Recording::every(recording.every),
    )?;
    if pre.terminal != Terminal::Converged {
        return Err(DynamicsError::PretrainFailed {
            steps: pre.steps.last().map_or(0, |s| s.t),
            loss: pre.final_loss(),
            target: pretrain.loss_stop,
        });
    }
    let minimum = ParamVector(pre.final_state.clone());
    let runs = run_ensemble(ensemble, switch.seed, |seed| {
        let cfg = SgdConfig {
            seed,
            ..switch.clone()
        };
        run_sgd(spec, &minimum, data, &cfg, recording)
    })?;
    let summary = EnsembleSummary::from_trajectories(&runs);
    Ok(EscapeResult {
        pretrain: pre,
        minimum,
        runs,
        summary,
    })
}
