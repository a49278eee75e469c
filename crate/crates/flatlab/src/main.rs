use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use flatlab_core::harness::{run_with_threads, Experiment, ExperimentConfig};

const CONFIG_ERROR: u8 = 1;
const VERIFICATION_FAILED: u8 = 2;

fn parse_experiment(s: &str) -> Result<Experiment, String> {
    s.parse()
}

/// Run a flatlab experiment recipe.
///
/// Exit status: 0 on success, 1 on configuration or runtime errors, 2 when a
/// verification recipe finds violations.
#[derive(Debug, Parser)]
#[command(name = "flatlab", version, after_long_help = ExperimentConfig::help_text())]
struct Cli {
    /// train-align | size-sweep | escape | stability-bound | noise-compare |
    /// kernel-spectrum | verify-olm | verify-lemmas
    #[arg(value_parser = parse_experiment)]
    experiment: Experiment,

    /// Config file of `key = value` lines; see `--help` for keys and defaults.
    #[arg(long, required_unless_present = "print_defaults")]
    config: Option<PathBuf>,

    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,

    /// Overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads.
    #[arg(long, env = "FLATLAB_THREADS")]
    threads: Option<usize>,

    /// Print the full default config for the experiment and exit.
    #[arg(long)]
    print_defaults: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(CONFIG_ERROR),
            };
        }
    };
    if cli.print_defaults {
        print!("{}", ExperimentConfig::defaults(cli.experiment).to_text());
        return ExitCode::SUCCESS;
    }
    let path = cli.config.expect("clap enforces --config");
    let mut cfg = match ExperimentConfig::from_path(&path, Some(cli.experiment)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    if cli.threads == Some(0) {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(CONFIG_ERROR);
    }
    match run_with_threads(&cfg, cli.threads) {
        Ok(manifest) => {
            for f in &manifest.outputs {
                println!("{}", cfg.output_dir.join(&f.name).display());
            }
            if manifest.verified {
                ExitCode::SUCCESS
            } else {
                eprintln!("verification failed; see {}", cfg.output_dir.display());
                ExitCode::from(VERIFICATION_FAILED)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CONFIG_ERROR)
        }
    }
}
