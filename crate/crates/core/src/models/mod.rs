//! Scalar-output models with hand-written per-sample gradients.
//!
//! Parameter layouts:
//! - `RandomFeature`: `θ ∈ R^m`, features `W` (m×d) frozen.
//! - `DeepLinear`: `W₁ (d×w₁), W₂ (w₁×w₂), …, W_L (w_{L-1}×1)`, each row-major, concatenated.
//! - `DiagonalLinear`: `(α₁…α_d, β₁…β_d)`, `F = α² − β²` elementwise.
//! - `TwoLayerMlp`: hidden weights `W` (m×d) row-major, then output weights `a ∈ R^m`.

mod dataset;

pub use dataset::{make_dataset, Dataset, DatasetKind};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, sample_standard_gaussian, DenseMatrix, NumericsError, RngStream};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("sample index {index} out of range for {n} samples")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("{what}: expected length {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid model: {0}")]
    InvalidSpec(String),
    #[error("model is not linear in its input")]
    NotOlm,
    #[error("dataset parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Flat parameter vector `θ ∈ R^p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(p: usize) -> Self {
        Self(vec![0.0; p])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// `f(x;θ) = Σⱼ θⱼ relu(wⱼᵀx)` with `W` (m×d) frozen.
    RandomFeature { features: DenseMatrix },
    /// `f(x;θ) = xᵀ W₁W₂⋯W_L`; `widths` are the hidden widths, output width is 1.
    DeepLinear {
        input_dim: usize,
        widths: Vec<usize>,
    },
    /// `f(x;θ) = Σᵢ (αᵢ² − βᵢ²) xᵢ`.
    DiagonalLinear { dim: usize },
    /// `f(x;θ) = Σⱼ aⱼ relu(wⱼᵀx)` with both layers trained.
    TwoLayerMlp { input_dim: usize, hidden: usize },
}

#[inline]
fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

#[inline]
fn relu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

impl ModelSpec {
    /// Random-feature model with `m` frozen Gaussian features of per-entry variance `weight_var`.
    pub fn random_feature(rng: &mut RngStream, m: usize, d: usize, weight_var: f64) -> Self {
        let w = sample_standard_gaussian(rng, m, d).scale(weight_var.sqrt());
        ModelSpec::RandomFeature { features: w }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |s: &str| Err(ModelError::InvalidSpec(s.to_string()));
        match self {
            ModelSpec::RandomFeature { features } => {
                if features.rows() == 0 || features.cols() == 0 {
                    return bad("random feature model needs m >= 1 and d >= 1");
                }
            }
            ModelSpec::DeepLinear { input_dim, widths } => {
                if *input_dim == 0 || widths.contains(&0) {
                    return bad("deep linear widths must be positive");
                }
            }
            ModelSpec::DiagonalLinear { dim } => {
                if *dim == 0 {
                    return bad("diagonal linear dimension must be positive");
                }
            }
            ModelSpec::TwoLayerMlp { input_dim, hidden } => {
                if *input_dim == 0 || *hidden == 0 {
                    return bad("mlp dimensions must be positive");
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelSpec::RandomFeature { features } => features.cols(),
            ModelSpec::DeepLinear { input_dim, .. } => *input_dim,
            ModelSpec::DiagonalLinear { dim } => *dim,
            ModelSpec::TwoLayerMlp { input_dim, .. } => *input_dim,
        }
    }

    /// `(rows, cols)` of each deep-linear layer.
    fn layer_shapes(input_dim: usize, widths: &[usize]) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(widths.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(widths);
        dims.push(1);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        match self {
            ModelSpec::RandomFeature { features } => features.rows(),
            ModelSpec::DeepLinear { input_dim, widths } => Self::layer_shapes(*input_dim, widths)
                .iter()
                .map(|(r, c)| r * c)
                .sum(),
            ModelSpec::DiagonalLinear { dim } => 2 * dim,
            ModelSpec::TwoLayerMlp { input_dim, hidden } => hidden * (input_dim + 1),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelSpec::RandomFeature { .. } => "random_feature",
            ModelSpec::DeepLinear { .. } => "deep_linear",
            ModelSpec::DiagonalLinear { .. } => "diagonal_linear",
            ModelSpec::TwoLayerMlp { .. } => "two_layer_mlp",
        }
    }

    /// True when `f(x;θ) = F(θ)ᵀx`.
    pub fn is_olm(&self) -> bool {
        matches!(
            self,
            ModelSpec::DeepLinear { .. } | ModelSpec::DiagonalLinear { .. }
        )
    }

    /// True when `f` is linear in `θ` (gradients do not depend on `θ`).
    pub fn is_linear_in_params(&self) -> bool {
        matches!(self, ModelSpec::RandomFeature { .. })
    }

    /// LeCun normal initialization: every weight `N(0, 1/fan_in)`.
    ///
    /// The diagonal network has no matrix layer; its `α, β` use fan-in `d`, as if the
    /// diagonal were one `d → d` layer feeding a fixed summation.
    pub fn init_params(&self, rng: &mut RngStream) -> ParamVector {
        let mut theta = Vec::with_capacity(self.param_count());
        let mut block = |rng: &mut RngStream, count: usize, fan_in: usize| {
            let s = (1.0 / fan_in as f64).sqrt();
            let z = sample_standard_gaussian(rng, 1, count);
            theta.extend(z.as_slice().iter().map(|v| v * s));
        };
        match self {
            ModelSpec::RandomFeature { features } => block(rng, features.rows(), features.rows()),
            ModelSpec::DeepLinear { input_dim, widths } => {
                for (r, c) in Self::layer_shapes(*input_dim, widths) {
                    block(rng, r * c, r);
                }
            }
            ModelSpec::DiagonalLinear { dim } => block(rng, 2 * dim, *dim),
            ModelSpec::TwoLayerMlp { input_dim, hidden } => {
                block(rng, hidden * input_dim, *input_dim);
                block(rng, *hidden, *hidden);
            }
        }
        ParamVector(theta)
    }

    fn check(&self, theta: &[f64], x: &[f64]) {
        assert_eq!(theta.len(), self.param_count(), "parameter length");
        assert_eq!(x.len(), self.input_dim(), "input length");
    }

    pub fn predict(&self, theta: &ParamVector, x: &[f64]) -> f64 {
        self.check(&theta.0, x);
        match self {
            ModelSpec::RandomFeature { features } => features
                .row_iter()
                .zip(&theta.0)
                .map(|(w, t)| t * relu(dot(w, x)))
                .sum(),
            ModelSpec::TwoLayerMlp { input_dim, hidden } => {
                let (w, a) = theta.0.split_at(hidden * input_dim);
                w.chunks_exact(*input_dim)
                    .zip(a)
                    .map(|(wj, aj)| aj * relu(dot(wj, x)))
                    .sum()
            }
            _ => dot(&self.end_to_end(theta), x),
        }
    }

    /// `∇_θ f(x;θ)`.
    pub fn per_sample_grad(&self, theta: &ParamVector, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.param_count()];
        self.value_and_grad_into(theta, x, &mut g);
        g
    }

    /// Writes `∇_θ f(x;θ)` into `grad` and returns `f(x;θ)`.
    pub fn value_and_grad_into(&self, theta: &ParamVector, x: &[f64], grad: &mut [f64]) -> f64 {
        self.check(&theta.0, x);
        assert_eq!(grad.len(), theta.len(), "gradient buffer length");
        match self {
            ModelSpec::RandomFeature { features } => {
                let mut f = 0.0;
                for ((w, t), g) in features.row_iter().zip(&theta.0).zip(grad.iter_mut()) {
                    let phi = relu(dot(w, x));
                    *g = phi;
                    f += t * phi;
                }
                f
            }
            ModelSpec::DiagonalLinear { dim } => {
                let (al, be) = theta.0.split_at(*dim);
                let (ga, gb) = grad.split_at_mut(*dim);
                let mut f = 0.0;
                for i in 0..*dim {
                    f += (al[i] * al[i] - be[i] * be[i]) * x[i];
                    ga[i] = 2.0 * al[i] * x[i];
                    gb[i] = -2.0 * be[i] * x[i];
                }
                f
            }
            ModelSpec::TwoLayerMlp { input_dim, hidden } => {
                let d = *input_dim;
                let (w, a) = theta.0.split_at(hidden * d);
                let (gw, ga) = grad.split_at_mut(hidden * d);
                let mut f = 0.0;
                for j in 0..*hidden {
                    let wj = &w[j * d..(j + 1) * d];
                    let z = dot(wj, x);
                    let h = relu(z);
                    f += a[j] * h;
                    ga[j] = h;
                    let s = a[j] * relu_grad(z);
                    for (g, xi) in gw[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *g = s * xi;
                    }
                }
                f
            }
            ModelSpec::DeepLinear { input_dim, widths } => {
                let shapes = Self::layer_shapes(*input_dim, widths);
                let layers = split_layers(&theta.0, &shapes);
                // Forward activations h₀ = x, h_k = h_{k-1} W_k.
                let mut acts: Vec<Vec<f64>> = Vec::with_capacity(shapes.len() + 1);
                acts.push(x.to_vec());
                for (w, &(r, c)) in layers.iter().zip(&shapes) {
                    let h = acts.last().expect("nonempty");
                    let mut next = vec![0.0; c];
                    for i in 0..r {
                        let hi = h[i];
                        if hi != 0.0 {
                            for (n, wij) in next.iter_mut().zip(&w[i * c..(i + 1) * c]) {
                                *n += hi * wij;
                            }
                        }
                    }
                    acts.push(next);
                }
                let f = acts.last().expect("nonempty")[0];
                // Backward: b_L = [1], b_{k-1} = W_k b_k; ∂f/∂W_k = h_{k-1} b_kᵀ.
                let mut back = vec![1.0];
                let mut offsets = Vec::with_capacity(shapes.len());
                let mut off = 0;
                for &(r, c) in &shapes {
                    offsets.push(off);
                    off += r * c;
                }
                for k in (0..shapes.len()).rev() {
                    let (r, c) = shapes[k];
                    let h = &acts[k];
                    let g = &mut grad[offsets[k]..offsets[k] + r * c];
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] = h[i] * back[j];
                        }
                    }
                    let w = layers[k];
                    back = (0..r).map(|i| dot(&w[i * c..(i + 1) * c], &back)).collect();
                }
                f
            }
        }
    }

    /// End-to-end linear map `F(θ) ∈ R^d` of an over-parameterized linear model.
    ///
    /// Panics for models that are not linear in the input.
    pub fn end_to_end(&self, theta: &ParamVector) -> Vec<f64> {
        match self {
            ModelSpec::DiagonalLinear { dim } => {
                let (al, be) = theta.0.split_at(*dim);
                al.iter().zip(be).map(|(a, b)| a * a - b * b).collect()
            }
            ModelSpec::DeepLinear { input_dim, widths } => {
                let shapes = Self::layer_shapes(*input_dim, widths);
                let layers = split_layers(&theta.0, &shapes);
                // Right-to-left product keeps every intermediate a vector.
                let mut v = vec![1.0];
                for (w, &(r, c)) in layers.iter().zip(&shapes).rev() {
                    v = (0..r).map(|i| dot(&w[i * c..(i + 1) * c], &v)).collect();
                }
                v
            }
            _ => panic!("end_to_end requires a model linear in its input"),
        }
    }

    /// Jacobian `∂F/∂θ` as a `d × p` matrix. Row `k` is `∇_θ f(e_k; θ)`.
    pub fn olm_jacobian(&self, theta: &ParamVector) -> Result<DenseMatrix, ModelError> {
        if !self.is_olm() {
            return Err(ModelError::NotOlm);
        }
        let d = self.input_dim();
        let p = self.param_count();
        let mut j = DenseMatrix::zeros(d, p);
        let mut e = vec![0.0; d];
        for k in 0..d {
            e[k] = 1.0;
            self.value_and_grad_into(theta, &e, j.row_mut(k));
            e[k] = 0.0;
        }
        Ok(j)
    }
}

fn split_layers<'a>(theta: &'a [f64], shapes: &[(usize, usize)]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut rest = theta;
    for &(r, c) in shapes {
        let (head, tail) = rest.split_at(r * c);
        out.push(head);
        rest = tail;
    }
    out
}

fn validate_batch(data: &Dataset, batch: &[usize]) -> Result<(), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let n = data.len();
    if let Some(&index) = batch.iter().find(|&&i| i >= n) {
        return Err(ModelError::IndexOutOfRange { index, n });
    }
    Ok(())
}

/// Mean of `½(f−y)²` over `batch` and its gradient `mean((f−y)∇f)`.
pub fn batch_loss_and_grad(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &Dataset,
    batch: &[usize],
) -> Result<(f64, Vec<f64>), ModelError> {
    validate_batch(data, batch)?;
    let p = spec.param_count();
    let mut grad = vec![0.0; p];
    let mut g = vec![0.0; p];
    let mut loss = 0.0;
    for &i in batch {
        let f = spec.value_and_grad_into(theta, data.input(i), &mut g);
        let e = f - data.targets[i];
        loss += 0.5 * e * e;
        crate::numerics::axpy(e, &g, &mut grad);
    }
    let inv = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|v| *v *= inv);
    Ok((loss * inv, grad))
}

/// Full-data loss `(1/2n) Σ (f(xᵢ)−yᵢ)²`.
pub fn full_loss(spec: &ModelSpec, theta: &ParamVector, data: &Dataset) -> f64 {
    let n = data.len();
    (0..n)
        .map(|i| {
            let e = spec.predict(theta, data.input(i)) - data.targets[i];
            0.5 * e * e
        })
        .sum::<f64>()
        / n as f64
}
