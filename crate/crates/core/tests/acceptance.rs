//! Acceptance criteria. Each test prints one `criterion N (...): PASS|FAIL ...` line
//! straight to stdout, so the lines show even when libtest captures output.
//! Tests hold a shared lock so the runtime limits measure one criterion at a time.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use flatlab_core::dynamics::{
    run_ensemble, run_linearized, EnsembleSummary, NoiseSpec, Recording, Sampling, SgdConfig,
};
use flatlab_core::harness::recipes::{displacement_with_loss, low_rank_problem};
use flatlab_core::harness::verify::{
    check_curvature_ratio_bound, check_fast_path, check_gd_factor, check_olm_covariance,
    check_one_step_expectation, check_uniformity_lemmas, CheckOutcome,
};
use flatlab_core::harness::{run_with_threads, ExperimentConfig, RunManifest};
use flatlab_core::kernels::arccos_kernel;
use flatlab_core::numerics::RngStream;
use serde_json::Value;

static SERIAL: Mutex<()> = Mutex::new(());

const SEED: u64 = 20240611;

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, name: &str, passed: bool, details: &str) {
    let line = format!(
        "criterion {n} ({name}): {} {details}\n",
        if passed { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn checks_line(checks: &[&CheckOutcome]) -> String {
    checks
        .iter()
        .map(|c| {
            format!(
                "{}: {}/{} violations, {} {:.3e}",
                c.name, c.violations, c.cases, c.measure, c.worst
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn run_in(dir: &Path, text: &str, threads: Option<usize>) -> RunManifest {
    let mut cfg = ExperimentConfig::parse(text, None).expect("acceptance config parses");
    cfg.output_dir = dir.to_path_buf();
    run_with_threads(&cfg, threads).expect("recipe runs")
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn f(v: &Value, key: &str) -> f64 {
    v.pointer(key)
        .and_then(Value::as_f64)
        .unwrap_or_else(|| panic!("summary has no number at {key}: {v}"))
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

#[test]
fn criterion_01_online_noise_covariance() {
    let _g = serial();
    let start = Instant::now();
    let cases = check_olm_covariance(10, 100_000, 5.0, SEED).unwrap();
    let elapsed = start.elapsed();
    let max_z = cases.iter().map(|c| c.max_z).fold(0.0, f64::max);
    let min_mu = cases.iter().map(|c| c.mu).fold(f64::INFINITY, f64::min);
    let kinds: Vec<&str> = cases.iter().map(|c| c.kind).collect();
    let ok = cases.len() == 10
        && cases.iter().all(|c| c.passed)
        && kinds.contains(&"deep_linear")
        && kinds.contains(&"diagonal_linear")
        && within(elapsed, 60);
    report(
        1,
        "online covariance closed form",
        ok,
        &format!(
            "cases={} max_z={max_z:.3} (limit 5) min_mu={min_mu:.6} elapsed={elapsed:.1?}",
            cases.len()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_02_fast_path_equivalence() {
    let _g = serial();
    let start = Instant::now();
    let c = check_fast_path(50, 100, 200, 1e-10, SEED).unwrap();
    let elapsed = start.elapsed();
    let ok = c.cases == 50 && c.passed() && within(elapsed, 10);
    report(
        2,
        "fast-path equivalence",
        ok,
        &format!("{} elapsed={elapsed:.1?}", checks_line(&[&c])),
    );
    assert!(ok);
}

#[test]
fn criterion_03_uniformity_lemmas() {
    let _g = serial();
    let start = Instant::now();
    let [lower, upper] = check_uniformity_lemmas(10_000, SEED).unwrap();
    let elapsed = start.elapsed();
    let ok = lower.cases == 10_000
        && upper.cases == 10_000
        && lower.passed()
        && upper.passed()
        && within(elapsed, 60);
    report(
        3,
        "mu1 >= gamma and mu2 <= tau",
        ok,
        &format!("{} elapsed={elapsed:.1?}", checks_line(&[&lower, &upper])),
    );
    assert!(ok);
}

#[test]
fn criterion_04_one_step_expectation() {
    let _g = serial();
    let start = Instant::now();
    let c = check_one_step_expectation(100, 1e-12, SEED).unwrap();
    let elapsed = start.elapsed();
    // Two sampling schemes per problem.
    let ok = c.cases == 200 && c.passed() && within(elapsed, 30);
    report(
        4,
        "exhaustive one-step expectation",
        ok,
        &format!("{} elapsed={elapsed:.1?}", checks_line(&[&c])),
    );
    assert!(ok);
}

#[test]
fn criterion_05_gd_factor_and_curvature_ratio() {
    let _g = serial();
    let gd = check_gd_factor(10_000, SEED).unwrap();
    let ratio = check_curvature_ratio_bound(10_000, SEED + 1).unwrap();
    let ok = gd.cases == 10_000 && ratio.cases == 10_000 && gd.passed() && ratio.passed();
    report(
        5,
        "gd factor and curvature-ratio bound",
        ok,
        &checks_line(&[&gd, &ratio]),
    );
    assert!(ok);
}

const ESCAPE_BASE: &str = "experiment = escape
preset = rfm
seed = 0
ensemble = 500
model.width = 400
data.n = 200
sgd.batch_size = 4
escape.steps = 500
escape.initial_loss = 1e-8
";

#[test]
fn criterion_06_escape_rate() {
    let _g = serial();
    let start = Instant::now();
    let sharp_dir = tempfile::tempdir().unwrap();
    run_in(
        sharp_dir.path(),
        &format!("{ESCAPE_BASE}escape.edge_ratio = 1.5\n"),
        None,
    );
    let sharp = summary(sharp_dir.path());
    let flat_dir = tempfile::tempdir().unwrap();
    run_in(
        flat_dir.path(),
        &format!("{ESCAPE_BASE}escape.edge_ratio = 0.8\n"),
        None,
    );
    let flat = summary(flat_dir.path());
    let elapsed = start.elapsed();

    let gamma0 = f(&sharp, "/bounds/gamma0");
    let rate = sharp
        .pointer("/fit/rate")
        .and_then(Value::as_f64)
        .unwrap_or(f64::NAN);
    let sharp_edge = f(&sharp, "/bounds/edge_ratio");
    let flat_edge = f(&flat, "/bounds/edge_ratio");
    let flat_eta_l1 = f(&flat, "/eta_lambda1");
    let flat_max = f(&flat, "/max_mean_ratio");
    let escapes = rate >= 0.85 * gamma0;
    let stays = flat_eta_l1 <= 2.0 && flat_max <= 10.0;
    let ok = escapes
        && stays
        && (sharp_edge - 1.5).abs() < 1e-9
        && (flat_edge - 0.8).abs() < 1e-9
        && within(elapsed, 300);
    report(
        6,
        "escape rate",
        ok,
        &format!(
            "mu0={:.4} edge 1.5: rate={rate:.4} vs 0.85*gamma0={:.4}; edge 0.8: eta*lambda1={flat_eta_l1:.3} max mean/L0={flat_max:.3} (limit 10) elapsed={elapsed:.1?}",
            f(&sharp, "/mu0"),
            0.85 * gamma0
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_07_bounded_noise_growth() {
    let _g = serial();
    let root = RngStream::new(SEED);
    let problem = low_rank_problem(&mut root.derive(0), 5, 200, 1.0);
    let eta = 2.0 / problem.lambda1_h();
    let b = 1;
    let delta0 = displacement_with_loss(&problem, 1.0, &mut root.derive(1)).unwrap();
    let l0 = problem.loss(&delta0);
    // Start at the clamp threshold so the cap binds on most steps.
    let sigma2 = l0 * problem.h_frob().powi(2) / b as f64;
    let base = SgdConfig {
        eta,
        batch_size: b,
        sampling: Sampling::WithReplacement,
        max_steps: 100,
        loss_stop: 0.0,
        seed: 0,
    };
    let noise = NoiseSpec::ClampedGeometryAware { cap: sigma2 };
    let runs = run_ensemble(4000, root.derive(2).seed(), |seed| {
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
    })
    .unwrap();
    let s = EnsembleSummary::from_trajectories(&runs);
    let mut ok = true;
    let mut parts = Vec::new();
    for t in [10usize, 50, 100] {
        let i = s.t.iter().position(|&x| x == t).expect("step recorded");
        let growth = s.mean[i] - l0;
        let bound = eta * eta * sigma2 * t as f64;
        let pass = growth <= bound + 3.0 * s.std_error[i];
        ok &= pass;
        parts.push(format!(
            "t={t}: growth={growth:.4} bound={bound:.4} se={:.4}",
            s.std_error[i]
        ));
    }
    report(7, "bounded-noise loss growth", ok, &parts.join("; "));
    assert!(ok);
}

#[test]
fn criterion_08_geometry_vs_isotropic_noise() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    run_in(
        dir.path(),
        "experiment = noise-compare\nensemble = 2000\nnoise.rank = 5\nnoise.dim = 200\n",
        None,
    );
    let s = summary(dir.path());
    let (geo, geo_pred) = (f(&s, "/geometry_fitted/rate"), f(&s, "/geometry_predicted"));
    let (iso, iso_pred) = (
        f(&s, "/isotropic_fitted/rate"),
        f(&s, "/isotropic_predicted"),
    );
    let close = |a: f64, b: f64| ((a - b) / b).abs() <= 0.25;
    let ok = geo > iso && close(geo, geo_pred) && close(iso, iso_pred) && f(&s, "/p") == 200.0;
    report(
        8,
        "geometry-aware vs isotropic noise",
        ok,
        &format!("geometry rate={geo:.4} predicted={geo_pred:.4}; isotropic rate={iso:.4} predicted={iso_pred:.4}"),
    );
    assert!(ok);
}

#[test]
fn criterion_09_alignment_along_training_and_size_sweep() {
    let _g = serial();
    let start = Instant::now();
    let train_dir = tempfile::tempdir().unwrap();
    run_in(
        train_dir.path(),
        "experiment = train-align\npreset = rfm\n",
        None,
    );
    let t = summary(train_dir.path());
    let sweep_dir = tempfile::tempdir().unwrap();
    run_in(
        sweep_dir.path(),
        "experiment = size-sweep\npreset = rfm\nsweep.widths = 500,1000,2000,4000\nsweep.repeats = 5\n",
        None,
    );
    let s = summary(sweep_dir.path());
    let elapsed = start.elapsed();

    let final_loss = f(&t, "/final_loss");
    let (alpha, mu, gamma) = (f(&t, "/min_alpha"), f(&t, "/min_mu"), f(&t, "/min_gamma"));
    let trained = final_loss < 1e-3 && alpha > 0.5 && mu > 0.0 && gamma > 0.0;
    let mu_spread = f(&s, "/mu_spread");
    let h_spread = f(&s, "/h_frob_spread");
    let traces: Vec<f64> = s["means"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| f(m, "/trace_h"))
        .collect();
    let trace_grows = traces.windows(2).all(|w| w[1] > w[0]);
    let converged = s["all_converged"].as_bool() == Some(true);
    let ok = trained
        && converged
        && mu_spread < 0.3
        && h_spread < 0.3
        && trace_grows
        && within(elapsed, 600);
    report(
        9,
        "alignment along training and size sweep",
        ok,
        &format!(
            "final_loss={final_loss:.2e} min_alpha={alpha:.4} min_mu={mu:.4} min_gamma={gamma:.4}; sweep converged={converged} mu_spread={mu_spread:.3} h_frob_spread={h_spread:.3} trace_h={traces:.1?} increasing={trace_grows} elapsed={elapsed:.1?}"
        ),
    );
    assert!(trained, "training sub-check failed");
    assert!(
        converged && mu_spread < 0.3 && h_spread < 0.3,
        "size-sweep spread sub-check failed"
    );
    assert!(
        trace_grows,
        "tr(H) does not grow monotonically with width: {traces:?}"
    );
    assert!(within(elapsed, 600), "runtime {elapsed:?}");
}

#[test]
fn criterion_10_kernel() {
    let _g = serial();
    let start = Instant::now();
    let pi = std::f64::consts::PI;
    let boundary = [(1.0, 0.5), (0.0, 1.0 / (2.0 * pi)), (-1.0, 0.0)]
        .iter()
        .map(|&(z, want)| (arccos_kernel(z).unwrap() - want).abs())
        .fold(0.0, f64::max);
    let dir = tempfile::tempdir().unwrap();
    run_in(
        dir.path(),
        "experiment = kernel-spectrum\nkernel.dims = 4,8,16,32\nkernel.widths = 100,1000,10000,100000\n",
        None,
    );
    let s = summary(dir.path());
    let elapsed = start.elapsed();
    let slope = f(&s, "/log_log_slope");
    let taus: Vec<f64> = s["spectra"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| f(x, "/tau"))
        .collect();
    let tau_decreasing = taus.windows(2).all(|w| w[1] < w[0]);
    let boundary_ok = boundary <= 1e-15;
    let slope_ok = (slope + 0.5).abs() <= 0.1;
    let ok = boundary_ok && slope_ok && tau_decreasing && within(elapsed, 300);
    report(
        10,
        "arc-cosine kernel",
        ok,
        &format!(
            "boundary max error={boundary:.1e}; log-log slope={slope:.4} (want -0.5 +- 0.1); tau over d=4,8,16,32: {taus:.4?} decreasing={tau_decreasing} elapsed={elapsed:.1?}"
        ),
    );
    assert!(
        boundary_ok && slope_ok,
        "boundary or convergence sub-check failed"
    );
    assert!(tau_decreasing, "tau does not decrease with d: {taus:?}");
    assert!(within(elapsed, 300), "runtime {elapsed:?}");
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_11_thread_count_determinism() {
    let _g = serial();
    let recipes = [
        "experiment = train-align\npreset = rfm\nseed = 7\nsgd.max_steps = 3000\nsgd.record_every = 250\nsgd.loss_stop = 0\n",
        "experiment = escape\npreset = rfm\nseed = 7\nensemble = 64\nmodel.width = 400\nsgd.batch_size = 4\nescape.steps = 200\nescape.write_runs = true\n",
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for text in recipes {
        let one = tempfile::tempdir().unwrap();
        let eight = tempfile::tempdir().unwrap();
        run_in(one.path(), text, Some(1));
        run_in(eight.path(), text, Some(8));
        let (a, b) = (csv_bytes(one.path()), csv_bytes(eight.path()));
        let same = !a.is_empty() && a == b;
        ok &= same;
        let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
        parts.push(format!("{}: identical={same}", names.join("+")));
    }
    report(
        11,
        "determinism across 1 and 8 threads",
        ok,
        &parts.join("; "),
    );
    assert!(ok);
}
