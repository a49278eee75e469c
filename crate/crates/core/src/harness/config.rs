//! Flat `key = value` experiment configuration with dotted section prefixes.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::dynamics::{NoiseSpec, Sampling, SgdConfig};
use crate::models::DatasetKind;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownKey {
        line: usize,
        key: String,
        suggestion: Option<String>,
    },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("no experiment given: set `experiment = ...` or name one on the command line")]
    MissingExperiment,
    #[error("config names experiment `{config}` but `{requested}` was requested")]
    ExperimentMismatch { config: String, requested: String },
    #[error("invalid `{field}`: {message}")]
    Invalid {
        field: &'static str,
        message: String,
    },
    #[error("cannot read config {path}: {message}")]
    Io { path: PathBuf, message: String },
}

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$var => $s),+ }
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($s => Ok($name::$var),)+
                    _ => Err(format!(
                        "`{}` is not one of {}",
                        s,
                        [$($s),+].join(", ")
                    )),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(Experiment {
    TrainAlign => "train-align",
    SizeSweep => "size-sweep",
    Escape => "escape",
    StabilityBound => "stability-bound",
    NoiseCompare => "noise-compare",
    KernelSpectrum => "kernel-spectrum",
    VerifyOlm => "verify-olm",
    VerifyLemmas => "verify-lemmas",
});

named_enum!(
    /// Named default bundles for model, data and optimizer.
    Preset {
        Rfm => "rfm",
        LinearNetD50 => "linear-net-d50",
        LinearNetD100 => "linear-net-d100",
        DiagonalLinear => "diagonal-linear",
        Mlp => "mlp",
    }
);

named_enum!(ModelKind {
    RandomFeature => "random-feature",
    DeepLinear => "deep-linear",
    DiagonalLinear => "diagonal-linear",
    TwoLayerMlp => "two-layer-mlp",
});

named_enum!(NoiseKind {
    Minibatch => "minibatch",
    GeometryAware => "geometry-aware",
    Isotropic => "isotropic",
    None => "none",
});

impl NoiseKind {
    pub fn spec(self) -> NoiseSpec {
        match self {
            NoiseKind::Minibatch => NoiseSpec::Minibatch,
            NoiseKind::GeometryAware => NoiseSpec::GeometryAware,
            NoiseKind::Isotropic => NoiseSpec::Isotropic { sigma2: None },
            NoiseKind::None => NoiseSpec::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Feature count for random-feature models, hidden width otherwise.
    pub width: usize,
    /// Hidden layers of a deep linear network.
    pub depth: usize,
    /// Feature-weight variance at `feature_ref_width`; scaled by `ref/width` at other widths.
    pub feature_variance: f64,
    pub feature_ref_width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub kind: DatasetKind,
    pub n: usize,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdSection {
    pub eta: f64,
    pub batch_size: usize,
    pub sampling: Sampling,
    pub max_steps: usize,
    pub loss_stop: f64,
    pub record_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSection {
    pub widths: Vec<usize>,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EscapeSection {
    /// `‖H‖_F / bound` used to pick `η`; `0` keeps `sgd.eta`.
    pub edge_ratio: f64,
    pub initial_loss: f64,
    pub steps: usize,
    pub mu_probes: usize,
    pub noise: NoiseKind,
    pub write_runs: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundSection {
    pub etas: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSection {
    pub rank: usize,
    pub dim: usize,
    pub curvature: f64,
    /// `0` means `1 / curvature`.
    pub eta: f64,
    pub batch_size: usize,
    pub initial_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSection {
    pub dims: Vec<usize>,
    pub points: usize,
    pub mc_pairs: usize,
    pub widths: Vec<usize>,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySection {
    pub cases: usize,
    pub samples: usize,
    /// Largest accepted Monte-Carlo z-score.
    pub z_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub preset: Preset,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Samples used for landscape statistics; `0` means all.
    pub probe_size: usize,
    pub ensemble: usize,
    pub model: ModelSection,
    pub data: DataSection,
    pub sgd: SgdSection,
    pub sweep: SweepSection,
    pub escape: EscapeSection,
    pub bound: BoundSection,
    pub noise: NoiseSection,
    pub kernel: KernelSection,
    pub verify: VerifySection,
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("experiment", "recipe to run"),
    ("preset", "rfm | linear-net-d50 | linear-net-d100 | diagonal-linear | mlp; sets model, data and sgd defaults"),
    ("seed", "master seed"),
    ("output_dir", "directory for CSV, JSON and manifest output"),
    ("probe_size", "samples used for landscape statistics; 0 = all"),
    ("ensemble", "independent runs per ensemble"),
    ("model.kind", "random-feature | deep-linear | diagonal-linear | two-layer-mlp"),
    ("model.width", "feature count (random-feature) or hidden width"),
    ("model.depth", "hidden layers of a deep linear network"),
    ("model.feature_variance", "feature-weight variance at model.feature_ref_width"),
    ("model.feature_ref_width", "width at which model.feature_variance applies unscaled"),
    ("data.kind", "rfm-synthetic | linear-teacher | binary-synthetic"),
    ("data.n", "training samples"),
    ("data.d", "input dimension"),
    ("sgd.eta", "learning rate"),
    ("sgd.batch_size", "batch size"),
    ("sgd.sampling", "with-replacement | without-replacement"),
    ("sgd.max_steps", "step budget"),
    ("sgd.loss_stop", "stop once the loss reaches this value; 0 disables"),
    ("sgd.record_every", "recording interval in steps"),
    ("sweep.widths", "comma-separated widths for size-sweep"),
    ("sweep.repeats", "seeds per width for size-sweep"),
    ("escape.edge_ratio", "target ||H||_F / stability bound used to choose eta; 0 keeps sgd.eta"),
    ("escape.initial_loss", "loss of the initial displacement"),
    ("escape.steps", "steps per escape run"),
    ("escape.mu_probes", "random displacements whose median mu gives mu0"),
    ("escape.noise", "minibatch | geometry-aware | isotropic | none"),
    ("escape.write_runs", "also write every run's loss series"),
    ("bound.etas", "comma-separated learning rates for stability-bound"),
    ("bound.batch_sizes", "comma-separated batch sizes for stability-bound"),
    ("noise.rank", "rank of the synthetic Hessian"),
    ("noise.dim", "parameter dimension of the synthetic Hessian"),
    ("noise.curvature", "nonzero Hessian eigenvalue"),
    ("noise.eta", "learning rate; 0 = 1 / noise.curvature"),
    ("noise.batch_size", "batch size entering the noise scale"),
    ("noise.initial_loss", "loss of the initial displacement"),
    ("noise.steps", "steps per run"),
    ("kernel.dims", "comma-separated input dimensions"),
    ("kernel.points", "points on the sphere per dimension"),
    ("kernel.mc_pairs", "Monte-Carlo draws for the uniformity function"),
    ("kernel.widths", "comma-separated feature counts for the convergence check"),
    ("kernel.repeats", "feature draws per width"),
    ("verify.cases", "random cases per check"),
    ("verify.samples", "Monte-Carlo draws per configuration"),
    ("verify.z_max", "largest accepted Monte-Carlo z-score"),
];

impl Preset {
    pub fn default_for(experiment: Experiment) -> Preset {
        match experiment {
            Experiment::VerifyOlm => Preset::LinearNetD100,
            _ => Preset::Rfm,
        }
    }
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        Self::with_preset(experiment, Preset::default_for(experiment))
    }

    pub fn with_preset(experiment: Experiment, preset: Preset) -> Self {
        let (model, data, sgd) = preset_sections(preset);
        ExperimentConfig {
            experiment,
            preset,
            seed: 0,
            output_dir: PathBuf::from("out"),
            probe_size: 0,
            ensemble: 500,
            model,
            data,
            sgd,
            sweep: SweepSection {
                widths: vec![500, 1000, 2000, 4000],
                repeats: 5,
            },
            escape: EscapeSection {
                edge_ratio: 1.5,
                initial_loss: 1e-8,
                steps: 500,
                mu_probes: 101,
                noise: NoiseKind::Minibatch,
                write_runs: false,
            },
            bound: BoundSection {
                etas: vec![0.001, 0.002, 0.003],
                batch_sizes: vec![5, 10, 20],
            },
            noise: NoiseSection {
                rank: 5,
                dim: 200,
                curvature: 1.0,
                eta: 0.0,
                batch_size: 1,
                initial_loss: 1e-10,
                steps: 12,
            },
            kernel: KernelSection {
                dims: vec![4, 8, 16, 32],
                points: 100,
                mc_pairs: 2000,
                widths: vec![100, 1000, 10_000, 100_000],
                repeats: 3,
            },
            verify: VerifySection {
                cases: 100,
                samples: 100_000,
                z_max: 5.0,
            },
        }
    }

    /// Parses config text. `requested` is the experiment named by the caller, which
    /// must agree with the file's `experiment` key when both are present.
    pub fn parse(text: &str, requested: Option<Experiment>) -> Result<Self, ConfigError> {
        let mut pairs: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (k, v) = trimmed.split_once('=').ok_or_else(|| ConfigError::Parse {
                line,
                message: format!("expected `key = value`, found `{trimmed}`"),
            })?;
            let key = k.trim().to_string();
            if !KEYS.iter().any(|(name, _)| *name == key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    suggestion: nearest_key(&key),
                    key,
                });
            }
            if pairs.iter().any(|(_, seen, _)| *seen == key) {
                return Err(ConfigError::DuplicateKey { line, key });
            }
            pairs.push((line, key, v.trim().to_string()));
        }
        let lookup = |name: &str| pairs.iter().find(|(_, k, _)| k == name);

        let from_file = match lookup("experiment") {
            Some((line, _, v)) => {
                Some(
                    v.parse::<Experiment>()
                        .map_err(|message| ConfigError::Parse {
                            line: *line,
                            message,
                        })?,
                )
            }
            None => None,
        };
        let experiment = match (from_file, requested) {
            (Some(f), Some(r)) if f != r => {
                return Err(ConfigError::ExperimentMismatch {
                    config: f.name().into(),
                    requested: r.name().into(),
                })
            }
            (Some(e), _) | (None, Some(e)) => e,
            (None, None) => return Err(ConfigError::MissingExperiment),
        };
        let preset = match lookup("preset") {
            Some((line, _, v)) => v.parse::<Preset>().map_err(|message| ConfigError::Parse {
                line: *line,
                message,
            })?,
            None => Preset::default_for(experiment),
        };
        let mut cfg = Self::with_preset(experiment, preset);
        for (line, key, value) in &pairs {
            if key == "experiment" || key == "preset" {
                continue;
            }
            cfg.set(key, value).map_err(|message| ConfigError::Parse {
                line: *line,
                message: format!("`{key}`: {message}"),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path, requested: Option<Experiment>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text, requested)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = num(v)?,
            "output_dir" => {
                if v.is_empty() {
                    return Err("must not be empty".into());
                }
                self.output_dir = PathBuf::from(v)
            }
            "probe_size" => self.probe_size = num(v)?,
            "ensemble" => self.ensemble = num(v)?,
            "model.kind" => self.model.kind = v.parse()?,
            "model.width" => self.model.width = num(v)?,
            "model.depth" => self.model.depth = num(v)?,
            "model.feature_variance" => self.model.feature_variance = num(v)?,
            "model.feature_ref_width" => self.model.feature_ref_width = num(v)?,
            "data.kind" => self.data.kind = v.parse()?,
            "data.n" => self.data.n = num(v)?,
            "data.d" => self.data.d = num(v)?,
            "sgd.eta" => self.sgd.eta = num(v)?,
            "sgd.batch_size" => self.sgd.batch_size = num(v)?,
            "sgd.sampling" => {
                self.sgd.sampling = match v {
                    "with-replacement" => Sampling::WithReplacement,
                    "without-replacement" => Sampling::WithoutReplacement,
                    _ => {
                        return Err(format!(
                            "`{v}` is not one of with-replacement, without-replacement"
                        ))
                    }
                }
            }
            "sgd.max_steps" => self.sgd.max_steps = num(v)?,
            "sgd.loss_stop" => self.sgd.loss_stop = num(v)?,
            "sgd.record_every" => self.sgd.record_every = num(v)?,
            "sweep.widths" => self.sweep.widths = list(v)?,
            "sweep.repeats" => self.sweep.repeats = num(v)?,
            "escape.edge_ratio" => self.escape.edge_ratio = num(v)?,
            "escape.initial_loss" => self.escape.initial_loss = num(v)?,
            "escape.steps" => self.escape.steps = num(v)?,
            "escape.mu_probes" => self.escape.mu_probes = num(v)?,
            "escape.noise" => self.escape.noise = v.parse()?,
            "escape.write_runs" => self.escape.write_runs = num(v)?,
            "bound.etas" => self.bound.etas = list(v)?,
            "bound.batch_sizes" => self.bound.batch_sizes = list(v)?,
            "noise.rank" => self.noise.rank = num(v)?,
            "noise.dim" => self.noise.dim = num(v)?,
            "noise.curvature" => self.noise.curvature = num(v)?,
            "noise.eta" => self.noise.eta = num(v)?,
            "noise.batch_size" => self.noise.batch_size = num(v)?,
            "noise.initial_loss" => self.noise.initial_loss = num(v)?,
            "noise.steps" => self.noise.steps = num(v)?,
            "kernel.dims" => self.kernel.dims = list(v)?,
            "kernel.points" => self.kernel.points = num(v)?,
            "kernel.mc_pairs" => self.kernel.mc_pairs = num(v)?,
            "kernel.widths" => self.kernel.widths = list(v)?,
            "kernel.repeats" => self.kernel.repeats = num(v)?,
            "verify.cases" => self.verify.cases = num(v)?,
            "verify.samples" => self.verify.samples = num(v)?,
            "verify.z_max" => self.verify.z_max = num(v)?,
            _ => unreachable!("key table and setter out of sync: {key}"),
        }
        Ok(())
    }

    /// All keys with their current values, in `KEYS` order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        fn join<T: fmt::Debug>(xs: &[T]) -> String {
            xs.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(",")
        }
        let sampling = match self.sgd.sampling {
            Sampling::WithReplacement => "with-replacement",
            Sampling::WithoutReplacement => "without-replacement",
        };
        vec![
            ("experiment", self.experiment.to_string()),
            ("preset", self.preset.to_string()),
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("probe_size", self.probe_size.to_string()),
            ("ensemble", self.ensemble.to_string()),
            ("model.kind", self.model.kind.to_string()),
            ("model.width", self.model.width.to_string()),
            ("model.depth", self.model.depth.to_string()),
            (
                "model.feature_variance",
                format!("{:?}", self.model.feature_variance),
            ),
            (
                "model.feature_ref_width",
                self.model.feature_ref_width.to_string(),
            ),
            ("data.kind", self.data.kind.name().to_string()),
            ("data.n", self.data.n.to_string()),
            ("data.d", self.data.d.to_string()),
            ("sgd.eta", format!("{:?}", self.sgd.eta)),
            ("sgd.batch_size", self.sgd.batch_size.to_string()),
            ("sgd.sampling", sampling.to_string()),
            ("sgd.max_steps", self.sgd.max_steps.to_string()),
            ("sgd.loss_stop", format!("{:?}", self.sgd.loss_stop)),
            ("sgd.record_every", self.sgd.record_every.to_string()),
            ("sweep.widths", join(&self.sweep.widths)),
            ("sweep.repeats", self.sweep.repeats.to_string()),
            ("escape.edge_ratio", format!("{:?}", self.escape.edge_ratio)),
            (
                "escape.initial_loss",
                format!("{:?}", self.escape.initial_loss),
            ),
            ("escape.steps", self.escape.steps.to_string()),
            ("escape.mu_probes", self.escape.mu_probes.to_string()),
            ("escape.noise", self.escape.noise.to_string()),
            ("escape.write_runs", self.escape.write_runs.to_string()),
            ("bound.etas", join(&self.bound.etas)),
            ("bound.batch_sizes", join(&self.bound.batch_sizes)),
            ("noise.rank", self.noise.rank.to_string()),
            ("noise.dim", self.noise.dim.to_string()),
            ("noise.curvature", format!("{:?}", self.noise.curvature)),
            ("noise.eta", format!("{:?}", self.noise.eta)),
            ("noise.batch_size", self.noise.batch_size.to_string()),
            (
                "noise.initial_loss",
                format!("{:?}", self.noise.initial_loss),
            ),
            ("noise.steps", self.noise.steps.to_string()),
            ("kernel.dims", join(&self.kernel.dims)),
            ("kernel.points", self.kernel.points.to_string()),
            ("kernel.mc_pairs", self.kernel.mc_pairs.to_string()),
            ("kernel.widths", join(&self.kernel.widths)),
            ("kernel.repeats", self.kernel.repeats.to_string()),
            ("verify.cases", self.verify.cases.to_string()),
            ("verify.samples", self.verify.samples.to_string()),
            ("verify.z_max", format!("{:?}", self.verify.z_max)),
        ]
    }

    /// Canonical text form; parsing it yields an identical config.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn sgd_config(&self, seed: u64) -> SgdConfig {
        SgdConfig {
            eta: self.sgd.eta,
            batch_size: self.sgd.batch_size,
            sampling: self.sgd.sampling,
            max_steps: self.sgd.max_steps,
            loss_stop: self.sgd.loss_stop,
            seed,
        }
    }

    /// Per-entry variance of random features at width `m`.
    pub fn feature_variance_at(&self, m: usize) -> f64 {
        self.model.feature_variance * self.model.feature_ref_width as f64 / m as f64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn check(ok: bool, field: &'static str, message: &str) -> Result<(), ConfigError> {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    field,
                    message: message.to_string(),
                })
            }
        }
        let pos = |x: f64| x.is_finite() && x > 0.0;
        check(self.ensemble >= 1, "ensemble", "must be at least 1")?;
        check(self.model.width >= 1, "model.width", "must be at least 1")?;
        check(
            self.model.kind != ModelKind::DeepLinear || self.model.depth >= 1,
            "model.depth",
            "must be at least 1",
        )?;
        check(
            pos(self.model.feature_variance),
            "model.feature_variance",
            "must be positive",
        )?;
        check(
            self.model.feature_ref_width >= 1,
            "model.feature_ref_width",
            "must be at least 1",
        )?;
        check(self.data.n >= 1, "data.n", "must be at least 1")?;
        check(self.data.d >= 1, "data.d", "must be at least 1")?;
        check(
            self.probe_size <= self.data.n,
            "probe_size",
            "cannot exceed data.n",
        )?;
        check(pos(self.sgd.eta), "sgd.eta", "must be positive")?;
        check(
            self.sgd.batch_size >= 1,
            "sgd.batch_size",
            "must be at least 1",
        )?;
        check(
            self.sgd.sampling == Sampling::WithReplacement || self.sgd.batch_size <= self.data.n,
            "sgd.batch_size",
            "cannot exceed data.n without replacement",
        )?;
        check(
            self.sgd.loss_stop.is_finite() && self.sgd.loss_stop >= 0.0,
            "sgd.loss_stop",
            "must be finite and non-negative",
        )?;
        check(
            self.sgd.record_every >= 1,
            "sgd.record_every",
            "must be at least 1",
        )?;
        check(
            !self.sweep.widths.is_empty() && self.sweep.widths.iter().all(|&w| w >= 1),
            "sweep.widths",
            "must list positive widths",
        )?;
        check(
            self.sweep.repeats >= 1,
            "sweep.repeats",
            "must be at least 1",
        )?;
        check(
            self.escape.edge_ratio.is_finite() && self.escape.edge_ratio >= 0.0,
            "escape.edge_ratio",
            "must be finite and non-negative",
        )?;
        check(
            pos(self.escape.initial_loss),
            "escape.initial_loss",
            "must be positive",
        )?;
        check(self.escape.steps >= 1, "escape.steps", "must be at least 1")?;
        check(
            self.escape.mu_probes >= 1,
            "escape.mu_probes",
            "must be at least 1",
        )?;
        check(
            !self.bound.etas.is_empty() && self.bound.etas.iter().all(|&e| pos(e)),
            "bound.etas",
            "must list positive learning rates",
        )?;
        check(
            !self.bound.batch_sizes.is_empty() && self.bound.batch_sizes.iter().all(|&b| b >= 1),
            "bound.batch_sizes",
            "must list positive batch sizes",
        )?;
        check(
            self.noise.rank >= 1 && self.noise.rank <= self.noise.dim,
            "noise.rank",
            "must lie in 1..=noise.dim",
        )?;
        check(
            pos(self.noise.curvature),
            "noise.curvature",
            "must be positive",
        )?;
        check(
            self.noise.eta.is_finite() && self.noise.eta >= 0.0,
            "noise.eta",
            "must be finite and non-negative",
        )?;
        check(
            self.noise.batch_size >= 1,
            "noise.batch_size",
            "must be at least 1",
        )?;
        check(
            pos(self.noise.initial_loss),
            "noise.initial_loss",
            "must be positive",
        )?;
        check(
            self.noise.steps >= 4,
            "noise.steps",
            "must be at least 4 for a rate fit",
        )?;
        check(
            !self.kernel.dims.is_empty() && self.kernel.dims.iter().all(|&d| d >= 2),
            "kernel.dims",
            "must list dimensions of at least 2",
        )?;
        check(
            self.kernel.points >= 2,
            "kernel.points",
            "must be at least 2",
        )?;
        check(
            self.kernel.mc_pairs >= 2,
            "kernel.mc_pairs",
            "must be at least 2",
        )?;
        check(
            self.kernel.widths.len() >= 2 && self.kernel.widths.iter().all(|&m| m >= 1),
            "kernel.widths",
            "must list at least two positive widths",
        )?;
        check(
            self.kernel.repeats >= 1,
            "kernel.repeats",
            "must be at least 1",
        )?;
        check(self.verify.cases >= 1, "verify.cases", "must be at least 1")?;
        check(
            self.verify.samples >= 2 * crate::oracles::JACKKNIFE_BLOCK,
            "verify.samples",
            "must cover at least two jackknife blocks",
        )?;
        check(pos(self.verify.z_max), "verify.z_max", "must be positive")?;
        Ok(())
    }

    /// `--help` text listing every key with its default under the default preset.
    pub fn help_text() -> String {
        let d = Self::defaults(Experiment::TrainAlign);
        let values = d.entries();
        let mut out = String::from(
            "Config keys (defaults shown for experiment = train-align, preset = rfm):\n",
        );
        for ((key, doc), (_, value)) in KEYS.iter().zip(values) {
            out.push_str(&format!("  {key} = {value}\n      {doc}\n"));
        }
        out.push_str("\nPresets:\n");
        for p in Preset::ALL {
            let (m, data, sgd) = preset_sections(*p);
            out.push_str(&format!(
                "  {}: {} width {} depth {}, {} n={} d={}, eta={:?} B={}\n",
                p,
                m.kind,
                m.width,
                m.depth,
                data.kind.name(),
                data.n,
                data.d,
                sgd.eta,
                sgd.batch_size
            ));
        }
        out
    }
}

fn preset_sections(preset: Preset) -> (ModelSection, DataSection, SgdSection) {
    let model = |kind, width, depth| ModelSection {
        kind,
        width,
        depth,
        feature_variance: 0.1,
        feature_ref_width: 2000,
    };
    let sgd = |eta, max_steps, record_every| SgdSection {
        eta,
        batch_size: 5,
        sampling: Sampling::WithReplacement,
        max_steps,
        loss_stop: 1e-3,
        record_every,
    };
    match preset {
        Preset::Rfm => (
            model(ModelKind::RandomFeature, 2000, 0),
            DataSection {
                kind: DatasetKind::RfmSynthetic,
                n: 200,
                d: 10,
            },
            sgd(0.003, 200_000, 1000),
        ),
        Preset::LinearNetD50 | Preset::LinearNetD100 => {
            let (n, d) = if preset == Preset::LinearNetD50 {
                (100, 50)
            } else {
                (50, 100)
            };
            (
                model(ModelKind::DeepLinear, 50, 3),
                DataSection {
                    kind: DatasetKind::LinearTeacher,
                    n,
                    d,
                },
                sgd(0.1, 50_000, 10),
            )
        }
        Preset::DiagonalLinear => (
            model(ModelKind::DiagonalLinear, 1, 0),
            DataSection {
                kind: DatasetKind::LinearTeacher,
                n: 50,
                d: 100,
            },
            sgd(0.05, 50_000, 10),
        ),
        Preset::Mlp => (
            model(ModelKind::TwoLayerMlp, 30, 0),
            DataSection {
                kind: DatasetKind::BinarySynthetic,
                n: 200,
                d: 20,
            },
            sgd(0.05, 100_000, 50),
        ),
    }
}

fn num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(s.trim())).collect()
}

fn nearest_key(key: &str) -> Option<String> {
    let leaf = |k: &str| k.rsplit('.').next().unwrap_or(k).to_string();
    KEYS.iter()
        .map(|(k, _)| {
            let whole = strsim::normalized_damerau_levenshtein(key, k);
            let part = strsim::normalized_damerau_levenshtein(&leaf(key), &leaf(k));
            (whole.max(part), *k)
        })
        .filter(|(score, _)| *score >= 0.5)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_table_matches_entries() {
        let names: Vec<&str> = ExperimentConfig::defaults(Experiment::Escape)
            .entries()
            .into_iter()
            .map(|(k, _)| k)
            .collect();
        let table: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
        assert_eq!(names, table);
    }

    #[test]
    fn every_preset_round_trips() {
        for &e in Experiment::ALL {
            for &p in Preset::ALL {
                let cfg = ExperimentConfig::with_preset(e, p);
                let back = ExperimentConfig::parse(&cfg.to_text(), None).unwrap();
                assert_eq!(cfg, back, "{e} / {p}");
            }
        }
    }

    #[test]
    fn empty_text_needs_an_experiment() {
        assert_eq!(
            ExperimentConfig::parse("", None),
            Err(ConfigError::MissingExperiment)
        );
        let cfg = ExperimentConfig::parse("# nothing\n", Some(Experiment::SizeSweep)).unwrap();
        assert_eq!(cfg, ExperimentConfig::defaults(Experiment::SizeSweep));
    }

    #[test]
    fn misspelled_key_suggests_nearest() {
        let err = ExperimentConfig::parse("experiment = escape\nsgd.learing_rate = 0.1\n", None)
            .unwrap_err();
        match err {
            ConfigError::UnknownKey { line, key, .. } => {
                assert_eq!(line, 2);
                assert_eq!(key, "sgd.learing_rate");
            }
            other => panic!("{other:?}"),
        }
        let err =
            ExperimentConfig::parse("experiment = escape\nsgd.bach_size = 3\n", None).unwrap_err();
        assert!(matches!(
            err,
            ConfigError::UnknownKey { suggestion: Some(ref s), .. } if s == "sgd.batch_size"
        ));
    }

    #[test]
    fn learing_rate_points_somewhere_sensible() {
        let err =
            ExperimentConfig::parse("experiment = escape\nlearing_rate = 0.1\n", None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learing_rate"), "{msg}");
    }

    #[test]
    fn preset_applies_before_other_keys_regardless_of_order() {
        let cfg = ExperimentConfig::parse(
            "data.n = 30\npreset = linear-net-d50\nexperiment = train-align\n",
            None,
        )
        .unwrap();
        assert_eq!(cfg.data.n, 30);
        assert_eq!(cfg.data.d, 50);
        assert_eq!(cfg.model.kind, ModelKind::DeepLinear);
    }

    #[test]
    fn rejects_bad_values_with_field_names() {
        let e = ExperimentConfig::parse("experiment = escape\nsgd.eta = -1\n", None).unwrap_err();
        assert!(matches!(
            e,
            ConfigError::Invalid {
                field: "sgd.eta",
                ..
            }
        ));
        let e = ExperimentConfig::parse("experiment = escape\nsgd.eta = fast\n", None).unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 2, .. }));
        let e =
            ExperimentConfig::parse("experiment = escape\nseed = 1\nseed = 2\n", None).unwrap_err();
        assert!(matches!(e, ConfigError::DuplicateKey { line: 3, .. }));
        let e = ExperimentConfig::parse("experiment = escape\n", Some(Experiment::TrainAlign))
            .unwrap_err();
        assert!(matches!(e, ConfigError::ExperimentMismatch { .. }));
        let e = ExperimentConfig::parse("experiment = escape\nno equals sign\n", None).unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 2, .. }));
    }

    #[test]
    fn lists_parse() {
        let cfg =
            ExperimentConfig::parse("experiment = size-sweep\nsweep.widths = 10, 20,30\n", None)
                .unwrap();
        assert_eq!(cfg.sweep.widths, vec![10, 20, 30]);
    }
}
