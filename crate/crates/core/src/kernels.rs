//! Degree-one arc-cosine kernel `κ(z) = (√(1−z²) + (π − arccos z)z)/(2π)` and the
//! spectra of its exact and random-feature kernel matrices on the unit sphere.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, norm2, sample_sphere, sym_eig, DenseMatrix, NumericsError, RngStream};

const CLAMP_TOL: f64 = 1e-12;
const SPHERE_TOL: f64 = 1e-10;
const MC_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("kernel argument {0} is outside [-1, 1]")]
    OutOfDomain(f64),
    #[error("row {row} has norm {norm}, expected 1")]
    NotOnSphere { row: usize, norm: f64 },
    #[error("feature dimension {found} does not match input dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("need at least {min} points, got {found}")]
    TooFewPoints { min: usize, found: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub fn arccos_kernel(z: f64) -> Result<f64, KernelError> {
    if !(z.abs() <= 1.0 + CLAMP_TOL) {
        return Err(KernelError::OutOfDomain(z));
    }
    let z = z.clamp(-1.0, 1.0);
    Ok(((1.0 - z * z).sqrt() + (PI - z.acos()) * z) / (2.0 * PI))
}

fn kappa(z: f64) -> f64 {
    arccos_kernel(z.clamp(-1.0, 1.0)).expect("clamped")
}

fn check_sphere(points: &DenseMatrix) -> Result<(), KernelError> {
    for (row, x) in points.row_iter().enumerate() {
        let norm = norm2(x);
        if (norm - 1.0).abs() > SPHERE_TOL {
            return Err(KernelError::NotOnSphere { row, norm });
        }
    }
    Ok(())
}

/// `K_ij = κ(xᵢᵀxⱼ)/n`.
pub fn kernel_matrix(points: &DenseMatrix) -> Result<DenseMatrix, KernelError> {
    check_sphere(points)?;
    let n = points.rows();
    let inv = 1.0 / n as f64;
    let mut k = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = kappa(dot(points.row(i), points.row(j))) * inv;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// ReLU features `Φ_{is} = relu(w_sᵀxᵢ)`, n×m.
pub fn relu_features(
    points: &DenseMatrix,
    features: &DenseMatrix,
) -> Result<DenseMatrix, KernelError> {
    if features.cols() != points.cols() {
        return Err(KernelError::DimensionMismatch {
            expected: points.cols(),
            found: features.cols(),
        });
    }
    let rows: Vec<Vec<f64>> = (0..points.rows())
        .into_par_iter()
        .map(|i| {
            let x = points.row(i);
            features.row_iter().map(|w| dot(w, x).max(0.0)).collect()
        })
        .collect();
    Ok(DenseMatrix::from_vec(
        points.rows(),
        features.rows(),
        rows.concat(),
    )?)
}

/// `K̂_ij = (1/(nm)) Σ_s relu(w_sᵀxᵢ) relu(w_sᵀxⱼ)`.
///
/// With `w_s` uniform on the radius-√d sphere, `E_w[relu(wᵀx)relu(wᵀx')] = κ(xᵀx')`
/// for unit `x, x'`, so `K̂ → K` as `m → ∞` with no extra normalization.
pub fn approx_kernel_matrix(
    points: &DenseMatrix,
    features: &DenseMatrix,
) -> Result<DenseMatrix, KernelError> {
    check_sphere(points)?;
    let phi = relu_features(points, features)?;
    let scale = 1.0 / (points.rows() as f64 * features.rows() as f64);
    Ok(phi.gram_rows().scale(scale))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpectrum {
    pub n: usize,
    pub d: usize,
    pub lambda1: f64,
    /// `Σ λⱼ² = ‖K‖_F²`.
    pub frob_sq: f64,
    /// `λ₁² / Σ λⱼ²`.
    pub tau: f64,
    pub chi_min: f64,
    pub chi_bar: f64,
    /// Largest Monte-Carlo standard error among the `χ(xᵢ)` estimates.
    pub chi_std_error: f64,
}

impl KernelSpectrum {
    pub fn uniformity(&self) -> f64 {
        self.chi_min / self.chi_bar
    }
}

/// Mean and standard error of `f` over `samples` fresh unit-sphere draws.
pub fn mc_sphere_mean(
    rng: &mut RngStream,
    d: usize,
    samples: usize,
    f: impl Fn(&[f64]) -> f64 + Sync,
) -> Result<(f64, f64), KernelError> {
    if samples < 2 {
        return Err(KernelError::TooFewPoints {
            min: 2,
            found: samples,
        });
    }
    let root = RngStream::new(rand::RngCore::next_u64(rng));
    let sums: Vec<Result<(f64, f64), KernelError>> = (0..samples.div_ceil(MC_CHUNK))
        .into_par_iter()
        .map(|c| {
            let count = MC_CHUNK.min(samples - c * MC_CHUNK);
            let xs = sample_sphere(&mut root.derive(c as u64), 1.0, d, count)?;
            Ok(xs.row_iter().fold((0.0, 0.0), |(s, s2), x| {
                let v = f(x);
                (s + v, s2 + v * v)
            }))
        })
        .collect();
    let (mut s, mut s2) = (0.0, 0.0);
    for r in sums {
        let (a, b) = r?;
        s += a;
        s2 += b;
    }
    let k = samples as f64;
    let mean = s / k;
    let var = ((s2 - k * mean * mean) / (k - 1.0)).max(0.0);
    Ok((mean, (var / k).sqrt()))
}

/// Top operator eigenvalue `E_{x'}[κ(x'₁)]` (constant eigenfunction), by Monte Carlo.
pub fn mc_lambda1(
    rng: &mut RngStream,
    d: usize,
    samples: usize,
) -> Result<(f64, f64), KernelError> {
    mc_sphere_mean(rng, d, samples, |x| kappa(x[0]))
}

/// `E_{x,x'}[κ²(xᵀx')] = Σ_s λ_s²`, by Monte Carlo over `x'` with `x = e₁` (rotation invariance).
pub fn mc_square_sum(
    rng: &mut RngStream,
    d: usize,
    samples: usize,
) -> Result<(f64, f64), KernelError> {
    mc_sphere_mean(rng, d, samples, |x| kappa(x[0]).powi(2))
}

/// Spectral summary of `K` (or `K̂` when `features` is given), with `χ(xᵢ) = E_{x'}[k²(xᵢ, x')]`
/// estimated from `mc_pairs` fresh sphere draws shared by all points.
pub fn spectrum_report(
    points: &DenseMatrix,
    features: Option<&DenseMatrix>,
    mc_pairs: usize,
    rng: &mut RngStream,
) -> Result<KernelSpectrum, KernelError> {
    let n = points.rows();
    let d = points.cols();
    if n < 2 {
        return Err(KernelError::TooFewPoints { min: 2, found: n });
    }
    if mc_pairs < 2 {
        return Err(KernelError::TooFewPoints {
            min: 2,
            found: mc_pairs,
        });
    }
    let k = match features {
        Some(w) => approx_kernel_matrix(points, w)?,
        None => kernel_matrix(points)?,
    };
    let eig = sym_eig(&k)?;
    let lambda1 = eig.lambda_max();
    let frob_sq = k.as_slice().iter().map(|v| v * v).sum::<f64>();

    let probes = sample_sphere(rng, 1.0, d, mc_pairs)?;
    let probe_phi = match features {
        Some(w) => Some((
            relu_features(&probes, w)?,
            relu_features(points, w)?,
            w.rows(),
        )),
        None => None,
    };
    let m = mc_pairs as f64;
    let chis: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut s, mut s2) = (0.0, 0.0);
            for j in 0..mc_pairs {
                let kv = match &probe_phi {
                    Some((pp, xp, mfeat)) => dot(xp.row(i), pp.row(j)) / *mfeat as f64,
                    None => kappa(dot(points.row(i), probes.row(j))),
                };
                let v = kv * kv;
                s += v;
                s2 += v * v;
            }
            let mean = s / m;
            let var = ((s2 - m * mean * mean) / (m - 1.0)).max(0.0);
            (mean, (var / m).sqrt())
        })
        .collect();
    let chi_min = chis.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let chi_bar = chis.iter().map(|c| c.0).sum::<f64>() / n as f64;
    let chi_std_error = chis.iter().map(|c| c.1).fold(0.0, f64::max);
    Ok(KernelSpectrum {
        n,
        d,
        lambda1,
        frob_sq,
        tau: lambda1 * lambda1 / frob_sq,
        chi_min,
        chi_bar,
        chi_std_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_values() {
        assert_eq!(arccos_kernel(1.0).unwrap(), 0.5);
        assert!((arccos_kernel(0.0).unwrap() - 1.0 / (2.0 * PI)).abs() <= 1e-15);
        assert_eq!(arccos_kernel(-1.0).unwrap(), 0.0);
        assert!(arccos_kernel(1.0 + 1e-13).is_ok());
        assert!(matches!(
            arccos_kernel(1.1),
            Err(KernelError::OutOfDomain(_))
        ));
    }

    #[test]
    fn small_matrices() {
        let one = DenseMatrix::from_rows(&[vec![0.6, 0.8]]).unwrap();
        assert_eq!(kernel_matrix(&one).unwrap().as_slice(), &[0.5]);
        let anti = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let k = kernel_matrix(&anti).unwrap();
        assert_eq!(k[(0, 1)], 0.0);
        let bad = DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            kernel_matrix(&bad),
            Err(KernelError::NotOnSphere { .. })
        ));
    }

    #[test]
    fn dead_feature_gives_zero() {
        let x = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let w = DenseMatrix::from_rows(&[vec![-1.0, -1.0]]).unwrap();
        let kh = approx_kernel_matrix(&x, &w).unwrap();
        assert!(kh.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_kernel_is_psd() {
        let mut rng = RngStream::new(17);
        let x = sample_sphere(&mut rng, 1.0, 8, 50).unwrap();
        let eig = sym_eig(&kernel_matrix(&x).unwrap()).unwrap();
        assert!(*eig.eigenvalues.last().unwrap() >= -1e-10);
    }

    #[test]
    fn spectrum_fields_in_range() {
        let mut rng = RngStream::new(3);
        let x = sample_sphere(&mut rng, 1.0, 5, 40).unwrap();
        let s = spectrum_report(&x, None, 2000, &mut rng).unwrap();
        assert!(s.tau > 0.0 && s.tau <= 1.0);
        assert!(s.frob_sq >= s.lambda1 * s.lambda1);
        assert!(s.uniformity() > 0.0 && s.uniformity() <= 1.0);
    }
}
