use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn flatlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flatlab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FLATLAB_THREADS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn unknown_key_exits_1_with_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.txt", "sgd.etta = 0.1\n");
    let out = flatlab(&["verify-lemmas", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sgd.eta"), "stderr: {err}");
}

#[test]
fn experiment_mismatch_and_missing_file_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.txt", "experiment = escape\n");
    assert_eq!(
        flatlab(&["verify-lemmas", "--config", &cfg], dir.path())
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        flatlab(&["verify-lemmas", "--config", "nope.txt"], dir.path())
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        flatlab(&["not-an-experiment", "--config", &cfg], dir.path())
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn passing_verification_exits_0_and_writes_hashed_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.txt", "verify.cases = 5\n");
    let out = flatlab(
        &["verify-lemmas", "--config", &cfg, "--out", "run"],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("run/verify_lemmas.csv")).unwrap();
    let first = csv.lines().next().unwrap();
    let hash = first.strip_prefix("# config_hash=").expect("hash line");
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    let manifest = fs::read_to_string(dir.path().join("run/manifest.json")).unwrap();
    assert!(manifest.contains(hash));
    assert!(dir.path().join("run/config.txt").exists());
}

#[test]
fn failing_verification_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.txt",
        "verify.cases = 2\nverify.samples = 2000\nverify.z_max = 1e-9\n",
    );
    let out = flatlab(
        &["verify-olm", "--config", &cfg, "--out", "run"],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("run/verify_olm.csv").exists());
}

#[test]
fn seed_flag_changes_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.txt", "verify.cases = 2\n");
    let hash = |out: &str, seed: &str| {
        let o = flatlab(
            &[
                "verify-lemmas",
                "--config",
                &cfg,
                "--out",
                out,
                "--seed",
                seed,
            ],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0));
        let csv = fs::read_to_string(dir.path().join(out).join("verify_lemmas.csv")).unwrap();
        csv.lines().next().unwrap().to_string()
    };
    assert_ne!(hash("a", "1"), hash("b", "2"));
    assert_eq!(hash("c", "1"), hash("d", "1"));
}

#[test]
fn thread_env_is_honoured_and_zero_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.txt", "verify.cases = 2\n");
    let run = |env: &str| {
        Command::new(env!("CARGO_BIN_EXE_flatlab"))
            .args(["verify-lemmas", "--config", &cfg, "--out", "run"])
            .current_dir(dir.path())
            .env("FLATLAB_THREADS", env)
            .output()
            .unwrap()
    };
    assert_eq!(run("2").status.code(), Some(0));
    assert_eq!(run("0").status.code(), Some(1));
    assert_eq!(run("many").status.code(), Some(1));
}

#[test]
fn printed_defaults_name_their_experiment() {
    let dir = tempfile::tempdir().unwrap();
    for exp in ["escape", "train-align", "verify-olm"] {
        let out = flatlab(&[exp, "--print-defaults"], dir.path());
        assert_eq!(out.status.code(), Some(0));
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.starts_with(&format!("experiment = {exp}\n")));
        let cfg = write(dir.path(), "defaults.txt", &text);
        // A config naming a different experiment is rejected.
        let other = if exp == "escape" {
            "train-align"
        } else {
            "escape"
        };
        let out = flatlab(&[other, "--config", &cfg, "--out", "x"], dir.path());
        assert_eq!(out.status.code(), Some(1));
    }
}

#[test]
fn help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let out = flatlab(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("sgd.eta"));
}
