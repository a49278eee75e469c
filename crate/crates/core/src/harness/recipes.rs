//! The canned experiments. Each writes its CSVs and a `summary.json` into the sink and
//! reports whether its checks (if any) passed.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{
    build_linearized, run_ensemble, run_linearized, run_sgd, EnsembleSummary, LinearizedProblem,
    Recording, ReportMode, SgdConfig, Terminal, Trajectory,
};
use crate::kernels::{approx_kernel_matrix, kernel_matrix, spectrum_report, KernelSpectrum};
use crate::landscape::{fmt_f64, report_from_gram_cached, LandscapeReport};
use crate::models::{make_dataset, Dataset, ModelSpec, ParamVector};
use crate::numerics::{
    axpy, dot, norm2, sample_sphere, sample_standard_gaussian, DenseMatrix, RngStream,
};
use crate::stability::{
    compute_bounds, fit_summary_below, isotropic_vs_geometry_report, mu0_estimate, mu0_from_series,
    EscapeFit, StabilityBounds, SummaryRow, DEFAULT_FIT_LOSS_CAP, DEFAULT_TAIL_FRACTION,
};

use super::config::{Experiment, ExperimentConfig, ModelKind};
use super::output::OutputSink;
use super::verify::{check_olm_covariance, lemma_suite, CheckOutcome, OlmCase};
use super::HarnessError;

// Stream indices under the master seed.
const DATA: u64 = 0;
const MODEL: u64 = 1;
const INIT: u64 = 2;
const SGD: u64 = 3;
const PROBES: u64 = 4;
const START: u64 = 5;
const ENSEMBLE: u64 = 6;

pub(crate) fn run(cfg: &ExperimentConfig, sink: &mut OutputSink) -> Result<bool, HarnessError> {
    match cfg.experiment {
        Experiment::TrainAlign => train_align(cfg, sink),
        Experiment::SizeSweep => size_sweep(cfg, sink),
        Experiment::Escape => escape(cfg, sink),
        Experiment::StabilityBound => stability_bound(cfg, sink),
        Experiment::NoiseCompare => noise_compare(cfg, sink),
        Experiment::KernelSpectrum => kernel_spectrum(cfg, sink),
        Experiment::VerifyOlm => verify_olm(cfg, sink),
        Experiment::VerifyLemmas => verify_lemmas(cfg, sink),
    }
}

/// Model described by the config at width `width`.
pub fn build_model(cfg: &ExperimentConfig, width: usize, rng: &mut RngStream) -> ModelSpec {
    let d = cfg.data.d;
    match cfg.model.kind {
        ModelKind::RandomFeature => {
            ModelSpec::random_feature(rng, width, d, cfg.feature_variance_at(width))
        }
        ModelKind::DeepLinear => ModelSpec::DeepLinear {
            input_dim: d,
            widths: vec![width; cfg.model.depth],
        },
        ModelKind::DiagonalLinear => ModelSpec::DiagonalLinear { dim: d },
        ModelKind::TwoLayerMlp => ModelSpec::TwoLayerMlp {
            input_dim: d,
            hidden: width,
        },
    }
}

fn build_data(cfg: &ExperimentConfig, root: &RngStream) -> Dataset {
    make_dataset(
        cfg.data.kind,
        &mut root.derive(DATA),
        cfg.data.n,
        cfg.data.d,
    )
}

fn report_mode(cfg: &ExperimentConfig) -> ReportMode {
    if cfg.probe_size == 0 || cfg.probe_size >= cfg.data.n {
        ReportMode::Full
    } else {
        ReportMode::Probe(cfg.probe_size)
    }
}

fn train(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    data: &Dataset,
    theta0: &ParamVector,
    sgd: &SgdConfig,
) -> Result<Trajectory, HarnessError> {
    let rec = Recording::with_reports(cfg.sgd.record_every, report_mode(cfg));
    Ok(run_sgd(spec, theta0, data, sgd, rec)?)
}

fn min_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    xs.flatten()
        .fold(None, |a: Option<f64>, x| Some(a.map_or(x, |a| a.min(x))))
}

/// Mean of the defined values over the final `fraction` of a series.
pub fn tail_mean(xs: &[Option<f64>], fraction: f64) -> Option<f64> {
    let k = ((xs.len() as f64 * fraction).ceil() as usize).min(xs.len());
    let tail: Vec<f64> = xs[xs.len() - k..].iter().flatten().copied().collect();
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    params: usize,
    steps: usize,
    terminal: Terminal,
    final_loss: f64,
    reports: usize,
    min_alpha: Option<f64>,
    min_mu: Option<f64>,
    min_gamma: Option<f64>,
    uniformity_violations: usize,
    final_report: Option<LandscapeReport>,
}

fn train_summary(spec: &ModelSpec, traj: &Trajectory) -> TrainSummary {
    TrainSummary {
        params: spec.param_count(),
        steps: traj.steps.last().map_or(0, |s| s.t),
        terminal: traj.terminal,
        final_loss: traj.final_loss(),
        reports: traj.reports().count(),
        min_alpha: min_defined(traj.reports().map(|(_, r)| r.alpha)),
        min_mu: min_defined(traj.reports().map(|(_, r)| r.mu)),
        min_gamma: min_defined(traj.reports().map(|(_, r)| Some(r.gamma))),
        uniformity_violations: traj.uniformity_violations(),
        final_report: traj.reports().last().map(|(_, r)| r.clone()),
    }
}

fn train_align(cfg: &ExperimentConfig, sink: &mut OutputSink) -> Result<bool, HarnessError> {
    let root = RngStream::new(cfg.seed);
    let data = build_data(cfg, &root);
    let spec = build_model(cfg, cfg.model.width, &mut root.derive(MODEL));
    let theta0 = spec.init_params(&mut root.derive(INIT));
    let traj = train(
        cfg,
        &spec,
        &data,
        &theta0,
        &cfg.sgd_config(root.derive(SGD).seed()),
    )?;
    let mut body = String::new();
    traj.csv_rows(None, true, &mut body);
    sink.csv(
        "trajectory.csv",
        &Trajectory::csv_header(false, true),
        &body,
    )?;
    sink.json("summary.json", &train_summary(&spec, &traj))?;
    Ok(true)
}

/// One trained model of the size sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub width: usize,
    pub repeat: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub converged: bool,
    /// Mean `μ` over the final quarter of recorded reports.
    pub mu: Option<f64>,
    pub h_frob: f64,
    pub trace_h: f64,
}

impl SweepPoint {
    const CSV_HEADER: &'static str = "width,repeat,steps,final_loss,converged,mu,h_frob,trace_h";
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepMean {
    pub width: usize,
    pub mu: f64,
    pub h_frob: f64,
    pub trace_h: f64,
}

/// `(max − min) / min` of a positive series.
pub fn relative_spread(xs: &[f64]) -> f64 {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (hi - lo) / lo
}

#[derive(Debug, Serialize)]
struct SweepSummary {
    means: Vec<SweepMean>,
    all_converged: bool,
    mu_spread: f64,
    h_frob_spread: f64,
    trace_h_increasing: bool,
}

fn size_sweep(cfg: &ExperimentConfig, sink: &mut OutputSink) -> Result<bool, HarnessError> {
    let root = RngStream::new(cfg.seed);
    let jobs: Vec<(usize, usize)> = (0..cfg.sweep.repeats)
        .flat_map(|r| cfg.sweep.widths.iter().map(move |&w| (w, r)))
        .collect();
    let points = jobs
        .par_iter()
        .map(|&(width, repeat)| -> Result<SweepPoint, HarnessError> {
            // Data is shared across widths within a repeat.
            let rep = root.derive(repeat as u64);
            let data = build_data(cfg, &rep);
            let wrng = rep.derive(MODEL).derive(width as u64);
            let spec = build_model(cfg, width, &mut wrng.derive(0));
            let theta0 = spec.init_params(&mut wrng.derive(1));
            let traj = train(
                cfg,
                &spec,
                &data,
                &theta0,
                &cfg.sgd_config(wrng.derive(2).seed()),
            )?;
            let mus: Vec<Option<f64>> = traj.reports().map(|(_, r)| r.mu).collect();
            let last = traj.reports().last().map(|(_, r)| r.clone());
            Ok(SweepPoint {
                width,
                repeat,
                steps: traj.steps.last().map_or(0, |s| s.t),
                final_loss: traj.final_loss(),
                converged: traj.terminal == Terminal::Converged,
                mu: tail_mean(&mus, DEFAULT_TAIL_FRACTION),
                h_frob: last.as_ref().map_or(f64::NAN, |r| r.h_frob),
                trace_h: last.as_ref().map_or(f64::NAN, |r| r.trace_g),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut body = String::new();
    for p in &points {
        let _ = writeln!(
            body,
            "{},{},{},{},{},{},{},{}",
            p.width,
            p.repeat,
            p.steps,
            fmt_f64(p.final_loss),
            p.converged,
            p.mu.map(fmt_f64).unwrap_or_default(),
            fmt_f64(p.h_frob),
            fmt_f64(p.trace_h)
        );
    }
    sink.csv("size_sweep.csv", SweepPoint::CSV_HEADER, &body)?;

    let means: Vec<SweepMean> = cfg
        .sweep
        .widths
        .iter()
        .map(|&w| {
            let at: Vec<&SweepPoint> = points.iter().filter(|p| p.width == w).collect();
            let k = at.len() as f64;
            SweepMean {
                width: w,
                mu: at.iter().map(|p| p.mu.unwrap_or(f64::NAN)).sum::<f64>() / k,
                h_frob: at.iter().map(|p| p.h_frob).sum::<f64>() / k,
                trace_h: at.iter().map(|p| p.trace_h).sum::<f64>() / k,
            }
        })
        .collect();
    let mut body = String::new();
    for m in &means {
        let _ = writeln!(
            body,
            "{},{},{},{}",
            m.width,
            fmt_f64(m.mu),
            fmt_f64(m.h_frob),
            fmt_f64(m.trace_h)
        );
    }
    sink.csv("size_sweep_mean.csv", "width,mu,h_frob,trace_h", &body)?;
    let summary = SweepSummary {
        all_converged: points.iter().all(|p| p.converged),
        mu_spread: relative_spread(&means.iter().map(|m| m.mu).collect::<Vec<_>>()),
        h_frob_spread: relative_spread(&means.iter().map(|m| m.h_frob).collect::<Vec<_>>()),
        trace_h_increasing: means.windows(2).all(|w| w[1].trace_h > w[0].trace_h),
        means,
    };
    sink.json("summary.json", &summary)?;
    Ok(true)
}

/// Random isotropic displacement rescaled to loss `loss`.
pub fn displacement_with_loss(
    problem: &LinearizedProblem,
    loss: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>, HarnessError> {
    let mut d = sample_standard_gaussian(rng, 1, problem.p()).into_vec();
    let l = problem.loss(&d);
    if !(l > 0.0) {
        return Err(HarnessError::Degenerate(
            "random displacement has zero loss; the Hessian may vanish".into(),
        ));
    }
    let s = (loss / l).sqrt();
    d.iter_mut().for_each(|v| *v *= s);
    Ok(d)
}

/// Median `μ` and `μ₁` over `probes` random isotropic displacements.
pub fn median_alignment(
    problem: &LinearizedProblem,
    probes: usize,
    rng: &RngStream,
) -> Result<(f64, f64), HarnessError> {
    let lambda1_k = problem.lambda1_h() * problem.n() as f64;
    let reports = (0..probes)
        .into_par_iter()
        .map(|k| {
            let d = sample_standard_gaussian(&mut rng.derive(k as u64), 1, problem.p()).into_vec();
            report_from_gram_cached(problem.gram(), &problem.residuals(&d), Some(lambda1_k))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let median = |mut xs: Vec<f64>| -> Result<f64, HarnessError> {
        if xs.is_empty() {
            return Err(HarnessError::Degenerate(
                "no defined alignment at any probe".into(),
            ));
        }
        xs.sort_by(f64::total_cmp);
        let m = xs.len();
        Ok(if m % 2 == 1 {
            xs[m / 2]
        } else {
            0.5 * (xs[m / 2 - 1] + xs[m / 2])
        })
    };
    let mu = median(reports.iter().filter_map(|r| r.mu).collect())?;
    let mu1 = median(reports.iter().filter_map(|r| r.mu1).collect())?;
    Ok((mu, mu1))
}

/// Reference point and its linearization for escape-type recipes. Models linear in
/// their parameters have the same linearization everywhere, so they use `θ* = 0`;
/// others are first trained to `sgd.loss_stop`.
fn linearize(
    cfg: &ExperimentConfig,
    root: &RngStream,
) -> Result<(LinearizedProblem, Option<Trajectory>), HarnessError> {
    let data = build_data(cfg, root);
    let spec = build_model(cfg, cfg.model.width, &mut root.derive(MODEL));
    if spec.is_linear_in_params() {
        let theta = ParamVector::zeros(spec.param_count());
        return Ok((build_linearized(&spec, &theta, &data), None));
    }
    let theta0 = spec.init_params(&mut root.derive(INIT));
    let sgd = cfg.sgd_config(root.derive(SGD).seed());
    let rec = Recording::every(cfg.sgd.record_every);
    let pre = run_sgd(&spec, &theta0, &data, &sgd, rec)?;
    if pre.terminal != Terminal::Converged {
        return Err(HarnessError::Degenerate(format!(
            "pretraining ended {:?} at loss {:e} above sgd.loss_stop = {:e}",
            pre.terminal,
            pre.final_loss(),
            cfg.sgd.loss_stop
        )));
    }
    let theta_star = ParamVector(pre.final_state.clone());
    Ok((build_linearized(&spec, &theta_star, &data), Some(pre)))
}

/// Everything the escape recipe measures.
#[derive(Debug, Clone, Serialize)]
pub struct EscapeSummary {
    pub mu0: f64,
    pub mu1: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub initial_loss: f64,
    pub eta_lambda1: f64,
    pub bounds: StabilityBounds,
    pub fit: Option<EscapeFit>,
    pub fit_error: Option<String>,
    /// Largest ensemble-mean loss relative to the initial loss.
    pub max_mean_ratio: f64,
    pub final_mean_ratio: f64,
    pub diverged_runs: usize,
    pub pretrain_steps: Option<usize>,
}

fn escape(cfg: &ExperimentConfig, sink: &mut OutputSink) -> Result<bool, HarnessError> {
    let root = RngStream::new(cfg.seed);
    let (problem, pre) = linearize(cfg, &root)?;
    let (mu0, mu1) = median_alignment(&problem, cfg.escape.mu_probes, &root.derive(PROBES))?;
    let b = cfg.sgd.batch_size;
    let eta = if cfg.escape.edge_ratio > 0.0 {
        cfg.escape.edge_ratio * (b as f64 / mu0).sqrt() / problem.h_frob()
    } else {
        cfg.sgd.eta
    };
    let delta0 =
        displacement_with_loss(&problem, cfg.escape.initial_loss, &mut root.derive(START))?;
    let base = SgdConfig {
        eta,
        batch_size: b,
        sampling: cfg.sgd.sampling,
        max_steps: cfg.escape.steps,
        loss_stop: 0.0,
        seed: 0,
    };
    let noise = cfg.escape.noise.spec();
    let runs = run_ensemble(cfg.ensemble, root.derive(ENSEMBLE).seed(), |seed| {
        run_linearized(
            &problem,
            &delta0,
            &SgdConfig {
                seed,
                ..base.clone()
            },
            noise,
            Recording::every(1),
        )
    })?;
    let summary = EnsembleSummary::from_trajectories(&runs);
    let l0 = problem.loss(&delta0);
    let bounds = compute_bounds(
        eta,
        b,
        mu0,
        mu1,
        problem.p(),
        problem.h_frob(),
        problem.trace_h(),
        problem.lambda1_h(),
    )?;
    let (fit, fit_error) = match fit_summary_below(&summary, DEFAULT_FIT_LOSS_CAP) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let max_mean = summary
        .mean
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let out = EscapeSummary {
        mu0,
        mu1,
        eta,
        batch_size: b,
        initial_loss: l0,
        eta_lambda1: eta * problem.lambda1_h(),
        bounds,
        fit,
        fit_error,
        max_mean_ratio: max_mean / l0,
        final_mean_ratio: summary.mean.last().copied().unwrap_or(f64::NAN) / l0,
        diverged_runs: runs
            .iter()
            .filter(|r| r.terminal == Terminal::Diverged)
            .count(),
        pretrain_steps: pre.map(|p| p.steps.last().map_or(0, |s| s.t)),
    };
    let csv = summary.to_csv();
    let (header, body) = csv.split_once('\n').expect("header line");
    sink.csv("escape_mean.csv", header, body)?;
    if cfg.escape.write_runs {
        let mut body = String::new();
        for (i, r) in runs.iter().enumerate() {
            r.csv_rows(Some(i), false, &mut body);
        }
        sink.csv(
            "escape_runs.csv",
            &Trajectory::csv_header(true, false),
            &body,
        )?;
    }
    sink.json("summary.json", &out)?;
    Ok(true)
}

fn stability_bound(cfg: &ExperimentConfig, sink: &mut OutputSink) -> Result<bool, HarnessError> {
    let root = RngStream::new(cfg.seed);
    let data = build_data(cfg, &root);
    let spec = build_model(cfg, cfg.model.width, &mut root.derive(MODEL));
    let theta0 = spec.init_params(&mut root.derive(INIT));
    let grid: Vec<(f64, usize)> = cfg
        .bound
        .etas
        .iter()
        .flat_map(|&e| cfg.bound.batch_sizes.iter().map(move |&b| (e, b)))
        .collect();

    #[derive(Serialize)]
    struct Point {
        config_id: String,
        terminal: Terminal,
        final_loss: f64,
        row: Option<SummaryRow>,
        note: Option<String>,
    }

    let points = grid
        .par_iter()
        .enumerate()
        .map(|(i, &(eta, b))| -> Result<Point, HarnessError> {
            let id = format!("eta={eta:?}/B={b}");
            let sgd = SgdConfig {
                eta,
                batch_size: b,
                ..cfg.sgd_config(root.derive(SGD).derive(i as u64).seed())
            };
            let traj = train(cfg, &spec, &data, &theta0, &sgd)?;
            let last = traj.reports().last().map(|(_, r)| r.clone());
            let mu1s: Vec<Option<f64>> = traj.reports().map(|(_, r)| r.mu1).collect();
            let row = match (mu0_estimate(&traj, DEFAULT_TAIL_FRACTION), last) {
                (Ok(mu0), Some(r)) if traj.terminal == Terminal::Converged => {
                    let mu1 = mu0_from_series(&mu1s, DEFAULT_TAIL_FRACTION).unwrap_or(mu0);
                    let bounds = compute_bounds(
                        eta,
                        b,
                        mu0,
                        mu1,
                        spec.param_count(),
                        r.h_frob,
                        r.trace_g,
                        r.lambda1_g,
                    )?;
                    Ok(SummaryRow::new(id.clone(), &bounds, None))
                }
                (Err(e), _) => Err(e.to_string()),
                _ => Err(format!("training ended {:?}", traj.terminal)),
            };
            Ok(Point {
                config_id: id,
                terminal: traj.terminal,
                final_loss: traj.final_loss(),
                note: row.as_ref().err().cloned(),
                row: row.ok(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut body = String::new();
    for p in &points {
        if let Some(r) = &p.row {
            body.push_str(&r.csv_row());
            body.push('\n');
        }
    }
    sink.csv("stability_summary.csv", SummaryRow::CSV_HEADER, &body)?;
    sink.json("summary.json", &points)?;
    Ok(true)
}

/// `k` orthonormal rows in `R^p` by Gram-Schmidt on Gaussian draws.
pub fn orthonormal_rows(rng: &mut RngStream, k: usize, p: usize) -> DenseMatrix {
    assert!(k <= p, "cannot fit {k} orthonormal rows in dimension {p}");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v = sample_standard_gaussian(rng, 1, p).into_vec();
        // Two passes keep the basis orthogonal to working precision.
        for _ in 0..2 {
            for u in &rows {
                let c = dot(u, &v);
                axpy(-c, u, &mut v);
            }
        }
        let n = norm2(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
        }
    }
    DenseMatrix::from_rows(&rows).expect("rows share a length")
}

/// Linearized problem with `H = c·UUᵀ` of rank `k` in `R^p`: `k` samples with
/// gradients `√(kc)·uᵢ`.
pub fn low_rank_problem(
    rng: &mut RngStream,
    rank: usize,
    p: usize,
    curvature: f64,
) -> LinearizedProblem {
    let u = orthonormal_rows(rng, rank, p);
    let g = u.scale((rank as f64 * curvature).sqrt());
    LinearizedProblem::from_gradients(g, ParamVector::zeros(p))
}

#[derive(Debug, Clone, Serialize)]
pub struct NoiseSummary {
    pub eta: f64,
    pub batch_size: usize,
    pub sigma2: f64,
    pub h_frob: f64,
    pub h_trace: f64,
    pub p: usize,
    pub geometry_predicted: f64,
    pub geometry_fitted: EscapeFit,
    pub isotropic_predicted: f64,
    pub isotropic_fitted: EscapeFit,
}

fn noise_compare(cfg: &ExperimentConfig, sink: &mut OutputSink) -> Result<bool, HarnessError> {
    let root = RngStream::new(cfg.seed);
    let n = &cfg.noise;
    let problem = low_rank_problem(&mut root.derive(MODEL), n.rank, n.dim, n.curvature);
    let eta = if n.eta > 0.0 {
        n.eta
    } else {
        1.0 / n.curvature
    };
    let delta0 = displacement_with_loss(&problem, n.initial_loss, &mut root.derive(START))?;
    let cmp = isotropic_vs_geometry_report(
        &problem,
        &delta0,
        eta,
        n.batch_size,
        cfg.ensemble,
        n.steps,
        root.derive(ENSEMBLE).seed(),
    )?;
    let mut body = String::new();
    for (name, run) in [
        ("geometry-aware", &cmp.geometry_aware),
        ("isotropic", &cmp.isotropic),
    ] {
        let s = &run.summary;
        for i in 0..s.t.len() {
            let _ = writeln!(
                body,
                "{name},{},{},{}",
                s.t[i],
                fmt_f64(s.mean[i]),
                fmt_f64(s.std_error[i])
            );
        }
    }
    sink.csv("noise_compare.csv", "noise,t,mean_loss,std_error", &body)?;
    sink.json(
        "summary.json",
        &NoiseSummary {
            eta: cmp.eta,
            batch_size: cmp.batch_size,
            sigma2: cmp.sigma2,
            h_frob: cmp.h_frob,
            h_trace: cmp.h_trace,
            p: cmp.p,
            geometry_predicted: cmp.geometry_aware.predicted,
            geometry_fitted: cmp.geometry_aware.fitted,
            isotropic_predicted: cmp.isotropic.predicted,
            isotropic_fitted: cmp.isotropic.fitted,
        },
    )?;
    Ok(true)
}

/// `‖K̂ − K‖_F / ‖K‖_F` for `m` fresh standard Gaussian features.
pub fn kernel_approx_error(
    points: &DenseMatrix,
    exact: &DenseMatrix,
    m: usize,
    rng: &mut RngStream,
) -> Result<f64, HarnessError> {
    let w = sample_standard_gaussian(rng, m, points.cols());
    let approx = approx_kernel_matrix(points, &w)?;
    let diff = approx.sub(exact)?;
    Ok(diff.frobenius_norm() / exact.frobenius_norm())
}

#[derive(Debug, Serialize)]
struct KernelSummary {
    spectra: Vec<KernelSpectrum>,
    tau_decreasing: bool,
    convergence_dim: usize,
    mean_errors: Vec<(usize, f64)>,
    log_log_slope: f64,
}

fn kernel_spectrum(cfg: &ExperimentConfig, sink: &mut OutputSink) -> Result<bool, HarnessError> {
    let root = RngStream::new(cfg.seed);
    let k = &cfg.kernel;
    let spectra = k
        .dims
        .iter()
        .enumerate()
        .map(|(i, &d)| -> Result<KernelSpectrum, HarnessError> {
            let rng = &mut root.derive(DATA).derive(i as u64);
            let pts = sample_sphere(rng, 1.0, d, k.points)?;
            Ok(spectrum_report(&pts, None, k.mc_pairs, rng)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut body = String::new();
    for s in &spectra {
        let _ = writeln!(
            body,
            "{},{},{},{},{},{},{},{},{}",
            s.d,
            s.n,
            fmt_f64(s.lambda1),
            fmt_f64(s.frob_sq),
            fmt_f64(s.tau),
            fmt_f64(s.chi_min),
            fmt_f64(s.chi_bar),
            fmt_f64(s.uniformity()),
            fmt_f64(s.chi_std_error)
        );
    }
    sink.csv(
        "kernel_spectrum.csv",
        "d,n,lambda1,frob_sq,tau,chi_min,chi_bar,uniformity,chi_std_error",
        &body,
    )?;

    let d = k.dims[0];
    let pts = sample_sphere(&mut root.derive(MODEL), 1.0, d, k.points)?;
    let exact = kernel_matrix(&pts)?;
    let mut errors = Vec::new();
    for (i, &m) in k.widths.iter().enumerate() {
        for r in 0..k.repeats {
            let rng = &mut root.derive(INIT).derive(i as u64).derive(r as u64);
            errors.push((m, r, kernel_approx_error(&pts, &exact, m, rng)?));
        }
    }
    let mut body = String::new();
    for (m, r, e) in &errors {
        let _ = writeln!(body, "{m},{r},{}", fmt_f64(*e));
    }
    sink.csv("kernel_convergence.csv", "m,repeat,rel_error", &body)?;
    let mean_errors: Vec<(usize, f64)> = k
        .widths
        .iter()
        .map(|&m| {
            let es: Vec<f64> = errors.iter().filter(|e| e.0 == m).map(|e| e.2).collect();
            (m, es.iter().sum::<f64>() / es.len() as f64)
        })
        .collect();
    let log_m: Vec<f64> = mean_errors.iter().map(|(m, _)| (*m as f64).ln()).collect();
    let errs: Vec<f64> = mean_errors.iter().map(|(_, e)| *e).collect();
    let slope = log_log_slope(&log_m, &errs);
    sink.json(
        "summary.json",
        &KernelSummary {
            tau_decreasing: spectra.windows(2).all(|w| w[1].tau < w[0].tau),
            spectra,
            convergence_dim: d,
            mean_errors,
            log_log_slope: slope,
        },
    )?;
    Ok(true)
}

/// Least-squares slope of `ln y` against `x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let k = x.len() as f64;
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let xm = x.iter().sum::<f64>() / k;
    let ym = ly.iter().sum::<f64>() / k;
    let sxy: f64 = x.iter().zip(&ly).map(|(a, b)| (a - xm) * (b - ym)).sum();
    let sxx: f64 = x.iter().map(|a| (a - xm).powi(2)).sum();
    sxy / sxx
}

fn verify_olm(cfg: &ExperimentConfig, sink: &mut OutputSink) -> Result<bool, HarnessError> {
    let cases: Vec<OlmCase> = check_olm_covariance(
        cfg.verify.cases,
        cfg.verify.samples,
        cfg.verify.z_max,
        cfg.seed,
    )?;
    let body: String = cases.iter().map(|c| c.csv_row() + "\n").collect();
    sink.csv("verify_olm.csv", OlmCase::CSV_HEADER, &body)?;
    let ok = cases.iter().all(|c| c.passed);
    sink.json(
        "summary.json",
        &serde_json::json!({ "passed": ok, "cases": cases }),
    )?;
    Ok(ok)
}

fn verify_lemmas(cfg: &ExperimentConfig, sink: &mut OutputSink) -> Result<bool, HarnessError> {
    let checks: Vec<CheckOutcome> = lemma_suite(cfg.verify.cases, cfg.seed)?;
    let body: String = checks.iter().map(|c| c.csv_row() + "\n").collect();
    sink.csv("verify_lemmas.csv", CheckOutcome::CSV_HEADER, &body)?;
    let ok = checks.iter().all(CheckOutcome::passed);
    sink.json(
        "summary.json",
        &serde_json::json!({ "passed": ok, "checks": checks }),
    )?;
    Ok(ok)
}
