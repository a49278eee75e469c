//! Closed-form linear-stability bounds and empirical escape-rate fits.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    run_ensemble, run_linearized, DynamicsError, EnsembleSummary, LinearizedProblem, NoiseSpec,
    Recording, Sampling, SgdConfig, Trajectory,
};
use crate::landscape::fmt_f64;
use crate::numerics::dot;

/// Loss above which the quadratic approximation is no longer trusted when fitting.
pub const DEFAULT_FIT_LOSS_CAP: f64 = 1e-1;
/// Default fraction of recorded steps used by [`mu0_estimate`].
pub const DEFAULT_TAIL_FRACTION: f64 = 0.25;

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("invalid hyperparameter {name} = {value}")]
    InvalidHyperparameter { name: &'static str, value: f64 },
    #[error("non-positive loss {loss} at index {index} in fit window")]
    NonPositiveLoss { index: usize, loss: f64 },
    #[error("fit window has {len} points, need at least 5")]
    WindowTooShort { len: usize },
    #[error("no defined mu in the trajectory tail")]
    NoDefinedMu,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityBounds {
    pub eta: f64,
    pub batch_size: usize,
    pub mu0: f64,
    pub mu1: f64,
    pub h_frob: f64,
    /// `√(B/μ₀)/η`
    pub sgd_bound: f64,
    /// `min(B/√((B−1)μ₁), 2B/μ₁)/η`; only the second branch when `B = 1`.
    pub mu1_bound: f64,
    /// `2/η`, bound on `λ₁(H)` for GD.
    pub gd_bound_lambda1: f64,
    /// `2√p/η`, implied bound on `‖H‖_F` for GD.
    pub gd_bound_frob: f64,
    /// `√(pB)/η`, bound on `tr(H)` under isotropic noise.
    pub isotropic_trace_bound: f64,
    /// `η²μ₀‖H‖_F²/B`.
    pub gamma0: f64,
    /// `‖H‖_F / sgd_bound`.
    pub edge_ratio: f64,
    pub h_trace: f64,
    pub h_lambda1: f64,
}

impl StabilityBounds {
    pub fn gd_stable(&self) -> bool {
        self.h_lambda1 <= self.gd_bound_lambda1
    }
}

#[allow(clippy::too_many_arguments)]
pub fn compute_bounds(
    eta: f64,
    batch_size: usize,
    mu0: f64,
    mu1: f64,
    p: usize,
    h_frob: f64,
    h_trace: f64,
    h_lambda1: f64,
) -> Result<StabilityBounds, StabilityError> {
    let positive = |name, value: f64| {
        if value > 0.0 && value.is_finite() {
            Ok(())
        } else {
            Err(StabilityError::InvalidHyperparameter { name, value })
        }
    };
    positive("eta", eta)?;
    positive("batch_size", batch_size as f64)?;
    positive("mu0", mu0)?;
    positive("mu1", mu1)?;
    positive("p", p as f64)?;
    for (name, v) in [
        ("h_frob", h_frob),
        ("h_trace", h_trace),
        ("h_lambda1", h_lambda1),
    ] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(StabilityError::InvalidHyperparameter { name, value: v });
        }
    }
    let b = batch_size as f64;
    let sgd_bound = (b / mu0).sqrt() / eta;
    let second = 2.0 * b / mu1;
    let mu1_bound = if batch_size == 1 {
        second
    } else {
        (b / ((b - 1.0) * mu1).sqrt()).min(second)
    } / eta;
    Ok(StabilityBounds {
        eta,
        batch_size,
        mu0,
        mu1,
        h_frob,
        sgd_bound,
        mu1_bound,
        gd_bound_lambda1: 2.0 / eta,
        gd_bound_frob: 2.0 * (p as f64).sqrt() / eta,
        isotropic_trace_bound: (p as f64 * b).sqrt() / eta,
        gamma0: eta * eta * mu0 * h_frob * h_frob / b,
        edge_ratio: h_frob / sgd_bound,
        h_trace,
        h_lambda1,
    })
}

/// `g(a, b, θ) = (−a·θᵀH²θ + b·θᵀH³θ)/θᵀHθ` for symmetric PSD `H` given as `h_apply`;
/// bounded below by `−a²/(4b)`. `None` when `θᵀHθ = 0`.
pub fn curvature_ratio_objective(
    h_apply: impl Fn(&[f64]) -> Vec<f64>,
    theta: &[f64],
    a: f64,
    b: f64,
) -> Option<f64> {
    let h1 = h_apply(theta);
    let quad = dot(theta, &h1);
    if !(quad > 0.0) {
        return None;
    }
    let h2 = h_apply(&h1);
    Some((-a * dot(&h1, &h1) + b * dot(&h1, &h2)) / quad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeFit {
    /// Per-step multiplicative rate `exp(slope)`.
    pub rate: f64,
    pub r2: f64,
    pub points: usize,
}

/// Least-squares fit of `log L` against `t`.
pub fn fit_log_linear(ts: &[f64], losses: &[f64]) -> Result<EscapeFit, StabilityError> {
    assert_eq!(ts.len(), losses.len());
    if ts.len() < 5 {
        return Err(StabilityError::WindowTooShort { len: ts.len() });
    }
    if let Some((index, &loss)) = losses.iter().enumerate().find(|(_, &l)| !(l > 0.0)) {
        return Err(StabilityError::NonPositiveLoss { index, loss });
    }
    let k = ts.len() as f64;
    let ys: Vec<f64> = losses.iter().map(|l| l.ln()).collect();
    let tm = ts.iter().sum::<f64>() / k;
    let ym = ys.iter().sum::<f64>() / k;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (t, y) in ts.iter().zip(&ys) {
        sxy += (t - tm) * (y - ym);
        sxx += (t - tm) * (t - tm);
        syy += (y - ym) * (y - ym);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy / (sxx * syy)).min(1.0)
    };
    Ok(EscapeFit {
        rate: slope.exp(),
        r2,
        points: ts.len(),
    })
}

/// Fit over `series[window]`, with the series index as the step.
pub fn fit_escape_rate(series: &[f64], window: Range<usize>) -> Result<EscapeFit, StabilityError> {
    let end = window.end.min(series.len());
    let start = window.start.min(end);
    let ts: Vec<f64> = (start..end).map(|t| t as f64).collect();
    fit_log_linear(&ts, &series[start..end])
}

/// Fit over the leading part of an ensemble mean series that stays below `cap`.
pub fn fit_summary_below(summary: &EnsembleSummary, cap: f64) -> Result<EscapeFit, StabilityError> {
    let end = summary
        .mean
        .iter()
        .position(|&l| !(l < cap))
        .unwrap_or(summary.mean.len());
    let ts: Vec<f64> = summary.t[..end].iter().map(|&t| t as f64).collect();
    fit_log_linear(&ts, &summary.mean[..end])
}

/// Minimum defined `μ` over the final `tail_fraction` of recorded reports.
pub fn mu0_estimate(traj: &Trajectory, tail_fraction: f64) -> Result<f64, StabilityError> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(StabilityError::InvalidHyperparameter {
            name: "tail_fraction",
            value: tail_fraction,
        });
    }
    let mus: Vec<Option<f64>> = traj.reports().map(|(_, r)| r.mu).collect();
    mu0_from_series(&mus, tail_fraction)
}

pub fn mu0_from_series(mus: &[Option<f64>], tail_fraction: f64) -> Result<f64, StabilityError> {
    let k = ((mus.len() as f64) * tail_fraction).ceil() as usize;
    mus[mus.len() - k.min(mus.len())..]
        .iter()
        .flatten()
        .copied()
        .fold(None, |acc: Option<f64>, m| {
            Some(acc.map_or(m, |a| a.min(m)))
        })
        .ok_or(StabilityError::NoDefinedMu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRun {
    pub predicted: f64,
    pub fitted: EscapeFit,
    pub summary: EnsembleSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseComparison {
    pub eta: f64,
    pub batch_size: usize,
    pub sigma2: f64,
    pub h_frob: f64,
    pub h_trace: f64,
    pub p: usize,
    pub geometry_aware: NoiseRun,
    pub isotropic: NoiseRun,
}

/// Geometry-aware against isotropic noise of equal total variance (`σ² = tr(H)/p`),
/// both from `delta0`. Predicted factors: `η²‖H‖_F²/B` and `η²tr(H)²/(pB)`.
#[allow(clippy::too_many_arguments)]
pub fn isotropic_vs_geometry_report(
    problem: &LinearizedProblem,
    delta0: &[f64],
    eta: f64,
    batch_size: usize,
    ensemble: usize,
    steps: usize,
    seed: u64,
) -> Result<NoiseComparison, StabilityError> {
    let p = problem.p();
    let b = batch_size as f64;
    let sigma2 = problem.trace_h() / p as f64;
    let base = SgdConfig {
        eta,
        batch_size,
        sampling: Sampling::WithReplacement,
        max_steps: steps,
        loss_stop: 0.0,
        seed,
    };
    let run = |noise: NoiseSpec, tag: u64| -> Result<EnsembleSummary, StabilityError> {
        let runs = run_ensemble(ensemble, seed ^ tag, |s| {
            let cfg = SgdConfig {
                seed: s,
                ..base.clone()
            };
            run_linearized(problem, delta0, &cfg, noise, Recording::every(1))
        })?;
        Ok(EnsembleSummary::from_trajectories(&runs))
    };
    let geo = run(NoiseSpec::GeometryAware, 0x6e0)?;
    let iso = run(
        NoiseSpec::Isotropic {
            sigma2: Some(sigma2),
        },
        0x150,
    )?;
    let h2 = problem.h_frob().powi(2);
    let fit = |s: &EnsembleSummary| fit_summary_below(s, DEFAULT_FIT_LOSS_CAP);
    Ok(NoiseComparison {
        eta,
        batch_size,
        sigma2,
        h_frob: problem.h_frob(),
        h_trace: problem.trace_h(),
        p,
        geometry_aware: NoiseRun {
            predicted: eta * eta * h2 / b,
            fitted: fit(&geo)?,
            summary: geo,
        },
        isotropic: NoiseRun {
            predicted: eta * eta * problem.trace_h().powi(2) / (p as f64 * b),
            fitted: fit(&iso)?,
            summary: iso,
        },
    })
}

/// One row of the stability summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config_id: String,
    pub eta: f64,
    pub batch_size: usize,
    pub mu0: f64,
    pub h_frob: f64,
    pub sgd_bound: f64,
    pub edge_ratio: f64,
    pub gamma0: f64,
    pub fitted_rate: Option<f64>,
    pub r2: Option<f64>,
}

impl SummaryRow {
    pub const CSV_HEADER: &'static str =
        "config_id,eta,B,mu0,h_frob,sgd_bound,edge_ratio,gamma0,fitted_rate,r2";

    pub fn new(config_id: impl Into<String>, b: &StabilityBounds, fit: Option<EscapeFit>) -> Self {
        Self {
            config_id: config_id.into(),
            eta: b.eta,
            batch_size: b.batch_size,
            mu0: b.mu0,
            h_frob: b.h_frob,
            sgd_bound: b.sgd_bound,
            edge_ratio: b.edge_ratio,
            gamma0: b.gamma0,
            fitted_rate: fit.map(|f| f.rate),
            r2: fit.map(|f| f.r2),
        }
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            self.config_id,
            fmt_f64(self.eta),
            self.batch_size,
            fmt_f64(self.mu0),
            fmt_f64(self.h_frob),
            fmt_f64(self.sgd_bound),
            fmt_f64(self.edge_ratio),
            fmt_f64(self.gamma0),
            opt(self.fitted_rate),
            opt(self.r2)
        );
        s
    }
}
