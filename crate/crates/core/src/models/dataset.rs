use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numerics::{sample_standard_gaussian, DenseMatrix, RngStream};

/// Inputs `X` (n×d) with scalar targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: DenseMatrix,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// `y = 0.2x₁ + (Σ_{i≥2} xᵢ − 1)²/3 + sin(Σ_{i≤d−2} xᵢx_{i+2}/4)`.
    RfmSynthetic,
    /// `y = Σ xᵢ / d`.
    LinearTeacher,
    /// `y = 1[vᵀx > 0]` for a random Gaussian direction `v`.
    BinarySynthetic,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 3] = [
        DatasetKind::RfmSynthetic,
        DatasetKind::LinearTeacher,
        DatasetKind::BinarySynthetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::RfmSynthetic => "rfm-synthetic",
            DatasetKind::LinearTeacher => "linear-teacher",
            DatasetKind::BinarySynthetic => "binary-synthetic",
        }
    }

    pub fn rfm_teacher(x: &[f64]) -> f64 {
        let d = x.len();
        let s: f64 = x.iter().skip(1).sum();
        let cross: f64 = (0..d.saturating_sub(2)).map(|i| x[i] * x[i + 2]).sum();
        0.2 * x[0] + (s - 1.0).powi(2) / 3.0 + (cross / 4.0).sin()
    }

    pub fn linear_teacher(x: &[f64]) -> f64 {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown dataset kind `{s}`"))
    }
}

impl Dataset {
    pub fn new(inputs: DenseMatrix, targets: Vec<f64>) -> Result<Self, ModelError> {
        if inputs.rows() != targets.len() {
            return Err(ModelError::LengthMismatch {
                what: "targets",
                expected: inputs.rows(),
                found: targets.len(),
            });
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(ModelError::Numerics(
                crate::numerics::NumericsError::NonFinite,
            ));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(indices),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    /// CSV with header `x0,…,x{d-1},y`; values written with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        for j in 0..d {
            let _ = write!(out, "x{j},");
        }
        out.push_str("y\n");
        for i in 0..self.len() {
            for v in self.input(i) {
                let _ = write!(out, "{v:.16e},");
            }
            let _ = writeln!(out, "{:.16e}", self.targets[i]);
        }
        out
    }

    /// Parses [`Dataset::to_csv`] output. Lines starting with `#` are skipped.
    pub fn from_csv(reader: impl Read) -> Result<Self, ModelError> {
        let reader = BufReader::new(reader);
        let mut d = None;
        let mut data = Vec::new();
        let mut targets = Vec::new();
        for (ln, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            let lineno = ln + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let Some(dim) = d else {
                let expected: Vec<String> = (0..fields.len().saturating_sub(1))
                    .map(|j| format!("x{j}"))
                    .chain(std::iter::once("y".to_string()))
                    .collect();
                if fields.len() < 2 || fields != expected {
                    return Err(ModelError::Parse {
                        line: lineno,
                        message: "header must be x0,...,x{d-1},y".into(),
                    });
                }
                d = Some(fields.len() - 1);
                continue;
            };
            if fields.len() != dim + 1 {
                return Err(ModelError::Parse {
                    line: lineno,
                    message: format!("expected {} fields, found {}", dim + 1, fields.len()),
                });
            }
            for (k, f) in fields.iter().enumerate() {
                let v: f64 = f.parse().map_err(|_| ModelError::Parse {
                    line: lineno,
                    message: format!("invalid number `{f}`"),
                })?;
                if k == dim {
                    targets.push(v);
                } else {
                    data.push(v);
                }
            }
        }
        let dim = d.ok_or(ModelError::Parse {
            line: 0,
            message: "missing header".into(),
        })?;
        let inputs = DenseMatrix::from_vec(targets.len(), dim, data)?;
        Self::new(inputs, targets)
    }
}

/// Gaussian inputs `N(0, I_d)` labelled by the chosen teacher.
pub fn make_dataset(kind: DatasetKind, rng: &mut RngStream, n: usize, d: usize) -> Dataset {
    assert!(n >= 1 && d >= 1, "dataset needs n, d >= 1");
    let inputs = sample_standard_gaussian(rng, n, d);
    let targets = match kind {
        DatasetKind::RfmSynthetic => inputs.row_iter().map(DatasetKind::rfm_teacher).collect(),
        DatasetKind::LinearTeacher => inputs.row_iter().map(DatasetKind::linear_teacher).collect(),
        DatasetKind::BinarySynthetic => {
            let v = sample_standard_gaussian(rng, 1, d);
            inputs
                .row_iter()
                .map(|x| {
                    if crate::numerics::dot(x, v.as_slice()) > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };
    Dataset { inputs, targets }
}
