//! Noise-geometry statistics at a parameter point.
//!
//! Gradients are stored row-wise: row `i` of `q` is `gᵢ = ∇f(xᵢ;θ)` and row `i` of `s`
//! is `eᵢgᵢ`. With that layout `G = qᵀq/n`, `Σ = (Ps)ᵀ(Ps)/n` and `Σ₁ = sᵀs/n`.
//! The fast path only forms the n×n Gram matrix `K = q qᵀ`:
//!
//! ```text
//! ‖G‖²      = ‖K‖²/n²
//! ‖Σ‖²      = ‖P M P‖²/n²,   M = diag(e) K diag(e)
//! tr(GΣ)    = ‖P C‖²/n²,     C = diag(e) K
//! tr(GΣ₁)   = ‖C‖²/n²
//! ∇LᵀG∇L    = ‖K e‖²/n³
//! χᵢ        = (1/n) Σⱼ Kᵢⱼ²
//! ```

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Dataset, ModelError, ModelSpec, ParamVector};
use crate::numerics::{dot, sym_eig, DenseMatrix, NumericsError, RngStream, MAX_EIG_DIM};

/// Below this loss the loss-scaled factors are not computed.
pub const DEGENERATE_LOSS: f64 = 1e-12;
/// Reports with loss below this are flagged as numerically fragile.
pub const SMALL_LOSS: f64 = 1e-10;
const DEGENERATE_GRAM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("loss {loss:e} is below {DEGENERATE_LOSS:e}; loss-scaled factors are undefined")]
    DegenerateLoss { loss: f64 },
    #[error("Fisher matrix norm {norm:e} is numerically zero")]
    DegenerateGram { norm: f64 },
    #[error("probe size {probe} exceeds sample count {n}")]
    ProbeTooLarge { probe: usize, n: usize },
    #[error("closed-form covariance requires a model linear in its input")]
    NotOlm,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone)]
pub struct GradientBundle {
    /// n×p, row `i` is `gᵢ`.
    pub q: DenseMatrix,
    /// n×p, row `i` is `eᵢgᵢ`.
    pub s: DenseMatrix,
    pub residuals: Vec<f64>,
    pub loss: f64,
}

impl GradientBundle {
    /// Builds a bundle from raw gradients and residuals.
    pub fn from_parts(q: DenseMatrix, residuals: Vec<f64>) -> Self {
        assert_eq!(q.rows(), residuals.len(), "one residual per gradient row");
        let n = q.rows();
        let p = q.cols();
        let s = DenseMatrix::from_fn(n, p, |i, j| residuals[i] * q[(i, j)]);
        let loss = residuals.iter().map(|e| e * e).sum::<f64>() / (2.0 * n as f64);
        Self {
            q,
            s,
            residuals,
            loss,
        }
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn p(&self) -> usize {
        self.q.cols()
    }
}

pub fn gradient_bundle(spec: &ModelSpec, theta: &ParamVector, data: &Dataset) -> GradientBundle {
    let p = spec.param_count();
    let rows: Vec<(f64, Vec<f64>)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut g = vec![0.0; p];
            let f = spec.value_and_grad_into(theta, data.input(i), &mut g);
            (f - data.targets[i], g)
        })
        .collect();
    let n = rows.len();
    let mut flat = Vec::with_capacity(n * p);
    let mut residuals = Vec::with_capacity(n);
    for (e, g) in rows {
        residuals.push(e);
        flat.extend(g);
    }
    let q = DenseMatrix::from_vec(n, p, flat).expect("gradient shape");
    GradientBundle::from_parts(q, residuals)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeReport {
    pub loss: f64,
    pub g_frob: f64,
    pub sigma_frob: f64,
    pub trace_g_sigma: f64,
    pub trace_g_sigma1: f64,
    /// Undefined when `Σ = 0` or the loss is degenerate.
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub mu: Option<f64>,
    pub mu1: Option<f64>,
    pub mu2: Option<f64>,
    pub gamma: f64,
    pub chi: Vec<f64>,
    pub chi_bar: f64,
    pub lambda1_g: f64,
    pub trace_g: f64,
    /// Reported as `‖G‖_F`; equals `‖H‖_F` at interpolating minima and on linearized models.
    pub h_frob: f64,
    /// Loss is below [`SMALL_LOSS`]; ratios are dominated by rounding.
    pub small_loss: bool,
}

impl LandscapeReport {
    pub fn chi_min(&self) -> f64 {
        self.chi.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `λ₁(G)² / ‖G‖_F²`.
    pub fn tau_g(&self) -> f64 {
        self.lambda1_g * self.lambda1_g / (self.g_frob * self.g_frob)
    }

    pub const CSV_HEADER: &'static str = "loss,g_frob,sigma_frob,trace_g_sigma,trace_g_sigma1,\
alpha,beta,mu,mu1,mu2,gamma,chi_min,chi_bar,lambda1_g,trace_g,h_frob,small_loss";

    /// One CSV row matching [`Self::CSV_HEADER`]; undefined values are empty fields.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            fmt_f64(self.loss),
            fmt_f64(self.g_frob),
            fmt_f64(self.sigma_frob),
            fmt_f64(self.trace_g_sigma),
            fmt_f64(self.trace_g_sigma1),
            opt(self.alpha),
            opt(self.beta),
            opt(self.mu),
            opt(self.mu1),
            opt(self.mu2),
            fmt_f64(self.gamma),
            fmt_f64(self.chi_min()),
            fmt_f64(self.chi_bar),
            fmt_f64(self.lambda1_g),
            fmt_f64(self.trace_g),
            fmt_f64(self.h_frob),
            self.small_loss
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Shortest decimal that round-trips.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Raw second-order quantities shared by the direct and fast paths.
struct Moments {
    n: usize,
    loss: f64,
    g_sq: f64,
    sigma_sq: f64,
    tr_g_sigma: f64,
    tr_g_sigma1: f64,
    grad_g_grad: f64,
    chi: Vec<f64>,
    lambda1_g: f64,
    trace_g: f64,
}

fn assemble(m: Moments) -> Result<LandscapeReport, LandscapeError> {
    let g_frob = m.g_sq.sqrt();
    if g_frob < DEGENERATE_GRAM {
        return Err(LandscapeError::DegenerateGram { norm: g_frob });
    }
    let sigma_frob = m.sigma_sq.sqrt();
    let defined = m.loss >= DEGENERATE_LOSS;
    let two_l = 2.0 * m.loss;
    let (alpha, beta, mu, mu1, mu2) = if defined {
        let alpha = (sigma_frob > 0.0).then(|| m.tr_g_sigma / (g_frob * sigma_frob));
        (
            alpha,
            Some(sigma_frob / (two_l * g_frob)),
            Some(m.tr_g_sigma / (two_l * m.g_sq)),
            Some(m.tr_g_sigma1 / (two_l * m.g_sq)),
            Some(m.grad_g_grad / (two_l * m.g_sq)),
        )
    } else {
        (None, None, None, None, None)
    };
    let chi_bar = m.chi.iter().sum::<f64>() / m.n as f64;
    let chi_min = m.chi.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(LandscapeReport {
        loss: m.loss,
        g_frob,
        sigma_frob,
        trace_g_sigma: m.tr_g_sigma,
        trace_g_sigma1: m.tr_g_sigma1,
        alpha,
        beta,
        mu,
        mu1,
        mu2,
        gamma: chi_min / chi_bar,
        chi: m.chi,
        chi_bar,
        lambda1_g: m.lambda1_g,
        trace_g: m.trace_g,
        h_frob: g_frob,
        small_loss: m.loss < SMALL_LOSS,
    })
}

fn strict(r: LandscapeReport) -> Result<LandscapeReport, LandscapeError> {
    if r.loss < DEGENERATE_LOSS {
        Err(LandscapeError::DegenerateLoss { loss: r.loss })
    } else {
        Ok(r)
    }
}

/// Centers the columns of `a` (subtracts each column mean), i.e. computes `P a`.
fn center_columns(a: &DenseMatrix) -> DenseMatrix {
    let n = a.rows();
    let mut means = vec![0.0; a.cols()];
    for row in a.row_iter() {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    DenseMatrix::from_fn(n, a.cols(), |i, j| a[(i, j)] - means[j])
}

fn frob_sq(a: &DenseMatrix) -> f64 {
    a.as_slice().iter().map(|v| v * v).sum()
}

/// All report fields from the p×p definitions of `G`, `Σ` and `Σ₁`.
pub fn report_direct(bundle: &GradientBundle) -> Result<LandscapeReport, LandscapeError> {
    report_direct_lenient(bundle).and_then(strict)
}

/// As [`report_direct`], but a degenerate loss yields `None` ratios instead of an error.
pub fn report_direct_lenient(bundle: &GradientBundle) -> Result<LandscapeReport, LandscapeError> {
    let n = bundle.n();
    let p = bundle.p();
    if p > MAX_EIG_DIM {
        return Err(NumericsError::DimensionTooLarge {
            dim: p,
            max: MAX_EIG_DIM,
        }
        .into());
    }
    let nf = n as f64;
    let qt = bundle.q.transpose();
    let g = qt.matmul(&bundle.q)?.scale(1.0 / nf);
    let sc = center_columns(&bundle.s);
    let sigma = sc.transpose().matmul(&sc)?.scale(1.0 / nf);
    let sigma1 = bundle.s.transpose().matmul(&bundle.s)?.scale(1.0 / nf);
    let grad: Vec<f64> = (0..p)
        .map(|j| (0..n).map(|i| bundle.s[(i, j)]).sum::<f64>() / nf)
        .collect();
    let tr_prod = |a: &DenseMatrix, b: &DenseMatrix| -> f64 {
        (0..p).map(|i| dot(a.row(i), &b.column(i))).sum()
    };
    let g_grad = g.mat_vec(&grad);
    let chi = (0..n)
        .map(|i| {
            let gi = bundle.q.row(i);
            dot(gi, &g.mat_vec(gi))
        })
        .collect();
    let eig = sym_eig(&g)?;
    assemble(Moments {
        n,
        loss: bundle.loss,
        g_sq: frob_sq(&g),
        sigma_sq: frob_sq(&sigma),
        tr_g_sigma: tr_prod(&g, &sigma),
        tr_g_sigma1: tr_prod(&g, &sigma1),
        grad_g_grad: dot(&grad, &g_grad),
        chi,
        lambda1_g: eig.lambda_max(),
        trace_g: g.trace(),
    })
}

/// All report fields from n×n Gram identities; never forms a p×p matrix.
pub fn report_fast(bundle: &GradientBundle) -> Result<LandscapeReport, LandscapeError> {
    report_fast_lenient(bundle).and_then(strict)
}

/// As [`report_fast`], but a degenerate loss yields `None` ratios instead of an error.
pub fn report_fast_lenient(bundle: &GradientBundle) -> Result<LandscapeReport, LandscapeError> {
    report_from_gram(&bundle.q.gram_rows(), &bundle.residuals)
}

/// Lenient fast-path report from the Gram matrix `Kᵢⱼ = gᵢᵀgⱼ` and residuals `e`.
pub fn report_from_gram(k: &DenseMatrix, e: &[f64]) -> Result<LandscapeReport, LandscapeError> {
    report_from_gram_cached(k, e, None)
}

/// As [`report_from_gram`], reusing a known top eigenvalue of `k` when given.
pub fn report_from_gram_cached(
    k: &DenseMatrix,
    e: &[f64],
    lambda1_k: Option<f64>,
) -> Result<LandscapeReport, LandscapeError> {
    let n = e.len();
    assert_eq!(k.rows(), n, "Gram matrix must be n×n");
    let nf = n as f64;
    let loss = dot(e, e) / (2.0 * nf);
    let c = DenseMatrix::from_fn(n, n, |i, j| e[i] * k[(i, j)]);
    let m = DenseMatrix::from_fn(n, n, |i, j| e[i] * k[(i, j)] * e[j]);
    let pm = center_columns(&m);
    let pmp = center_columns(&pm.transpose());
    let pc = center_columns(&c);
    let ke = k.mat_vec(e);
    let chi = k.row_iter().map(|r| dot(r, r) / nf).collect();
    let n2 = nf * nf;
    let lambda1_g = match lambda1_k {
        Some(l) => l / nf,
        None => sym_eig(k)?.lambda_max() / nf,
    };
    assemble(Moments {
        n,
        loss,
        g_sq: frob_sq(k) / n2,
        sigma_sq: frob_sq(&pmp) / n2,
        tr_g_sigma: frob_sq(&pc) / n2,
        tr_g_sigma1: frob_sq(&c) / n2,
        grad_g_grad: dot(&ke, &ke) / (n2 * nf),
        chi,
        lambda1_g,
        trace_g: k.trace() / nf,
    })
}

/// [`report_fast`] on a uniformly drawn probe of `probe_size` samples (without replacement).
pub fn report_subsampled(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &Dataset,
    probe_size: usize,
    rng: &mut RngStream,
) -> Result<LandscapeReport, LandscapeError> {
    let n = data.len();
    if probe_size > n || probe_size == 0 {
        return Err(LandscapeError::ProbeTooLarge {
            probe: probe_size,
            n,
        });
    }
    if probe_size == n {
        return report_fast(&gradient_bundle(spec, theta, data));
    }
    let idx = rng.sample_without_replacement(n, probe_size);
    report_fast(&gradient_bundle(spec, theta, &data.subset(&idx)))
}

/// Population quantities of the online setting for `f(x;θ) = F(θ)ᵀx`, `x ∼ N(0, S)`.
#[derive(Debug, Clone)]
pub struct OlmPopulation {
    pub sigma: DenseMatrix,
    pub g: DenseMatrix,
    pub loss: f64,
    pub grad: Vec<f64>,
}

impl OlmPopulation {
    /// `tr(ΣG) / (2L‖G‖_F²)`, or `None` at zero loss.
    pub fn mu(&self) -> Option<f64> {
        if self.loss < DEGENERATE_LOSS {
            return None;
        }
        let p = self.g.rows();
        let tr: f64 = (0..p)
            .map(|i| dot(self.sigma.row(i), &self.g.column(i)))
            .sum();
        let g_sq = frob_sq(&self.g);
        Some(tr / (2.0 * self.loss * g_sq))
    }
}

/// `u = F(θ)−F(θ*)`, `L = ½uᵀSu`, `G = JᵀSJ`, `∇L = JᵀSu`, `Σ = ∇L∇Lᵀ + 2LG`.
pub fn olm_covariance_closed_form(
    spec: &ModelSpec,
    theta: &ParamVector,
    theta_star: &ParamVector,
    input_cov: &DenseMatrix,
) -> Result<OlmPopulation, LandscapeError> {
    if !spec.is_olm() {
        return Err(LandscapeError::NotOlm);
    }
    let j = spec.olm_jacobian(theta)?;
    let f = spec.end_to_end(theta);
    let f_star = spec.end_to_end(theta_star);
    let u: Vec<f64> = f.iter().zip(&f_star).map(|(a, b)| a - b).collect();
    let su = input_cov.mat_vec(&u);
    let loss = 0.5 * dot(&u, &su);
    let sj = input_cov.matmul(&j)?;
    let g = j.transpose().matmul(&sj)?;
    let grad = j.tr_mat_vec(&su);
    let sigma = DenseMatrix::outer(&grad, &grad).add(&g.scale(2.0 * loss))?;
    Ok(OlmPopulation {
        sigma,
        g,
        loss,
        grad,
    })
}
