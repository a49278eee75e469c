//! Brute-force references. Nothing here reuses the fast paths it checks: only raw
//! model evaluation and the sampling primitives are shared.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{LinearizedProblem, Sampling};
use crate::models::{ModelSpec, ParamVector};
use crate::numerics::{sample_gaussian, Covariance, DenseMatrix, NumericsError, RngStream};

/// Enumeration limit for [`exhaustive_batch_expectation`].
pub const MAX_BATCHES: u128 = 1_000_000;
/// Samples per jackknife block.
pub const JACKKNIFE_BLOCK: usize = 100;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("model is not linear in its input")]
    NotOlm,
    #[error("{count} batches exceed the enumeration limit {MAX_BATCHES}")]
    TooManyBatches { count: u128 },
    #[error("need at least {min} samples, got {found}")]
    TooFewSamples { min: usize, found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Monte-Carlo estimate with entrywise standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: DenseMatrix,
    pub std_error: DenseMatrix,
    pub samples: usize,
}

impl McEstimate {
    /// Largest `|value − reference| / std_error` over entries; entries with zero error
    /// must match exactly (up to `1e-12` absolute) or count as infinite.
    pub fn max_z_score(&self, reference: &DenseMatrix) -> f64 {
        let mut worst: f64 = 0.0;
        for ((v, r), s) in self
            .value
            .as_slice()
            .iter()
            .zip(reference.as_slice())
            .zip(self.std_error.as_slice())
        {
            let diff = (v - r).abs();
            let z = if *s > 0.0 {
                diff / s
            } else if diff <= 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(z);
        }
        worst
    }
}

/// Covariance of i.i.d. vectors with delete-one-block jackknife errors.
/// `draw(rng, k)` must return `k` vectors as rows.
fn jackknife_covariance(
    samples: usize,
    dim: usize,
    rng: &mut RngStream,
    draw: impl Fn(&mut RngStream, usize) -> Result<DenseMatrix, OracleError> + Sync,
) -> Result<McEstimate, OracleError> {
    if samples < 2 * JACKKNIFE_BLOCK {
        return Err(OracleError::TooFewSamples {
            min: 2 * JACKKNIFE_BLOCK,
            found: samples,
        });
    }
    let blocks = samples / JACKKNIFE_BLOCK;
    let used = blocks * JACKKNIFE_BLOCK;
    let root = RngStream::new(rand::RngCore::next_u64(rng));
    // Per-block first and second moment sums.
    type Moments = (Vec<f64>, Vec<f64>);
    let sums: Vec<Result<Moments, OracleError>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let xs = draw(&mut root.derive(b as u64), JACKKNIFE_BLOCK)?;
            let mut s1 = vec![0.0; dim];
            let mut s2 = vec![0.0; dim * dim];
            for x in xs.row_iter() {
                for i in 0..dim {
                    s1[i] += x[i];
                    for j in 0..dim {
                        s2[i * dim + j] += x[i] * x[j];
                    }
                }
            }
            Ok((s1, s2))
        })
        .collect();
    let sums: Vec<(Vec<f64>, Vec<f64>)> = sums.into_iter().collect::<Result<_, _>>()?;
    let mut t1 = vec![0.0; dim];
    let mut t2 = vec![0.0; dim * dim];
    for (s1, s2) in &sums {
        t1.iter_mut().zip(s1).for_each(|(a, b)| *a += b);
        t2.iter_mut().zip(s2).for_each(|(a, b)| *a += b);
    }
    let cov = |s1: &[f64], s2: &[f64], k: f64| -> Vec<f64> {
        let mut c = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                c[i * dim + j] = s2[i * dim + j] / k - (s1[i] / k) * (s1[j] / k);
            }
        }
        c
    };
    let full = cov(&t1, &t2, used as f64);
    let k_minus = (used - JACKKNIFE_BLOCK) as f64;
    let loo: Vec<Vec<f64>> = sums
        .iter()
        .map(|(s1, s2)| {
            let a: Vec<f64> = t1.iter().zip(s1).map(|(t, s)| t - s).collect();
            let b: Vec<f64> = t2.iter().zip(s2).map(|(t, s)| t - s).collect();
            cov(&a, &b, k_minus)
        })
        .collect();
    let bf = blocks as f64;
    let mut se = vec![0.0; dim * dim];
    for e in 0..dim * dim {
        let mean = loo.iter().map(|c| c[e]).sum::<f64>() / bf;
        let ss = loo.iter().map(|c| (c[e] - mean).powi(2)).sum::<f64>();
        se[e] = ((bf - 1.0) / bf * ss).sqrt();
    }
    Ok(McEstimate {
        value: DenseMatrix::from_vec(dim, dim, full)?,
        std_error: DenseMatrix::from_vec(dim, dim, se)?,
        samples: used,
    })
}

/// Covariance of the single-sample gradient `(f(x;θ) − F(θ*)ᵀx)∇f(x;θ)` for `x ∼ N(0, S)`.
pub fn mc_noise_covariance(
    spec: &ModelSpec,
    theta: &ParamVector,
    theta_star: &ParamVector,
    input_cov: &DenseMatrix,
    samples: usize,
    rng: &mut RngStream,
) -> Result<McEstimate, OracleError> {
    if !spec.is_olm() {
        return Err(OracleError::NotOlm);
    }
    let p = spec.param_count();
    jackknife_covariance(samples, p, rng, |r, k| {
        let xs = sample_gaussian(r, Covariance::Full(input_cov), k)?;
        let mut out = DenseMatrix::zeros(k, p);
        for (i, x) in xs.row_iter().enumerate() {
            let y = spec.predict(theta_star, x);
            let row = out.row_mut(i);
            let f = spec.value_and_grad_into(theta, x, row);
            let e = f - y;
            row.iter_mut().for_each(|v| *v *= e);
        }
        Ok(out)
    })
}

/// Monte-Carlo `E[(vᵀz)² zzᵀ]` for `z ∼ N(0, S)`.
pub fn mc_fourth_moment(
    cov: &DenseMatrix,
    v: &[f64],
    samples: usize,
    rng: &mut RngStream,
) -> Result<McEstimate, OracleError> {
    let d = cov.rows();
    if v.len() != d {
        return Err(OracleError::InvalidArgument(
            "vector length must match covariance".into(),
        ));
    }
    if samples < 2 * JACKKNIFE_BLOCK {
        return Err(OracleError::TooFewSamples {
            min: 2 * JACKKNIFE_BLOCK,
            found: samples,
        });
    }
    let blocks = samples / JACKKNIFE_BLOCK;
    let root = RngStream::new(rand::RngCore::next_u64(rng));
    let sums: Vec<Result<Vec<f64>, OracleError>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let zs = sample_gaussian(
                &mut root.derive(b as u64),
                Covariance::Full(cov),
                JACKKNIFE_BLOCK,
            )?;
            let mut s = vec![0.0; d * d];
            for z in zs.row_iter() {
                let w: f64 = z.iter().zip(v).map(|(a, b)| a * b).sum::<f64>().powi(2);
                for i in 0..d {
                    for j in 0..d {
                        s[i * d + j] += w * z[i] * z[j];
                    }
                }
            }
            Ok(s)
        })
        .collect();
    let sums: Vec<Vec<f64>> = sums.into_iter().collect::<Result<_, _>>()?;
    let used = (blocks * JACKKNIFE_BLOCK) as f64;
    let mut total = vec![0.0; d * d];
    for s in &sums {
        total.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    let value: Vec<f64> = total.iter().map(|t| t / used).collect();
    let bf = blocks as f64;
    let rest = used - JACKKNIFE_BLOCK as f64;
    let mut se = vec![0.0; d * d];
    for e in 0..d * d {
        let loo: Vec<f64> = sums.iter().map(|s| (total[e] - s[e]) / rest).collect();
        let m = loo.iter().sum::<f64>() / bf;
        se[e] = ((bf - 1.0) / bf * loo.iter().map(|x| (x - m).powi(2)).sum::<f64>()).sqrt();
    }
    Ok(McEstimate {
        value: DenseMatrix::from_vec(d, d, value)?,
        std_error: DenseMatrix::from_vec(d, d, se)?,
        samples: blocks * JACKKNIFE_BLOCK,
    })
}

fn batch_count(n: usize, b: usize, sampling: Sampling) -> u128 {
    match sampling {
        Sampling::WithReplacement => (n as u128).checked_pow(b as u32).unwrap_or(u128::MAX),
        Sampling::WithoutReplacement => {
            if b > n {
                return 0;
            }
            let mut c: u128 = 1;
            for i in 0..b as u128 {
                c = c * (n as u128 - i) / (i + 1);
            }
            c
        }
    }
}

/// Exact expectation of the next-step loss of linearized mini-batch SGD, by enumerating
/// every equally likely batch (ordered tuples with replacement, subsets without).
pub fn exhaustive_batch_expectation(
    problem: &LinearizedProblem,
    delta: &[f64],
    eta: f64,
    batch_size: usize,
    sampling: Sampling,
) -> Result<f64, OracleError> {
    let n = problem.g.rows();
    if batch_size == 0 || (sampling == Sampling::WithoutReplacement && batch_size > n) {
        return Err(OracleError::InvalidArgument(format!(
            "batch size {batch_size} invalid for {n} samples"
        )));
    }
    let count = batch_count(n, batch_size, sampling);
    if count > MAX_BATCHES {
        return Err(OracleError::TooManyBatches { count });
    }
    let g = |i: usize| problem.g.row(i);
    let resid: Vec<f64> = (0..n)
        .map(|i| g(i).iter().zip(delta).map(|(a, b)| a * b).sum())
        .collect();
    let loss_after = |batch: &[usize]| -> f64 {
        let mut next = delta.to_vec();
        let s = eta / batch_size as f64;
        for &i in batch {
            for (k, gk) in g(i).iter().enumerate() {
                next[k] -= s * resid[i] * gk;
            }
        }
        let mut total = 0.0;
        for j in 0..n {
            let r: f64 = g(j).iter().zip(&next).map(|(a, b)| a * b).sum();
            total += r * r;
        }
        total / (2.0 * n as f64)
    };
    let mut idx = vec![0usize; batch_size];
    if sampling == Sampling::WithoutReplacement {
        for (k, v) in idx.iter_mut().enumerate() {
            *v = k;
        }
    }
    let mut sum = 0.0;
    let mut seen: u128 = 0;
    loop {
        sum += loss_after(&idx);
        seen += 1;
        let advanced = match sampling {
            Sampling::WithReplacement => next_tuple(&mut idx, n),
            Sampling::WithoutReplacement => next_combination(&mut idx, n),
        };
        if !advanced {
            break;
        }
    }
    debug_assert_eq!(seen, count);
    Ok(sum / seen as f64)
}

fn next_tuple(idx: &mut [usize], n: usize) -> bool {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < n {
            return true;
        }
        idx[k] = 0;
    }
    false
}

fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let b = idx.len();
    let mut k = b;
    while k > 0 {
        k -= 1;
        if idx[k] < n - b + k {
            idx[k] += 1;
            for j in k + 1..b {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Central differences of `f(x; ·)` at `θ`.
pub fn finite_diff_gradient(
    spec: &ModelSpec,
    theta: &ParamVector,
    x: &[f64],
    step: f64,
) -> Result<Vec<f64>, OracleError> {
    if !(1e-8..=1e-3).contains(&step) {
        return Err(OracleError::InvalidArgument(format!(
            "finite-difference step {step} outside [1e-8, 1e-3]"
        )));
    }
    let mut t = theta.clone();
    Ok((0..theta.len())
        .map(|k| {
            let orig = t.0[k];
            t.0[k] = orig + step;
            let up = spec.predict(&t, x);
            t.0[k] = orig - step;
            let down = spec.predict(&t, x);
            t.0[k] = orig;
            (up - down) / (2.0 * step)
        })
        .collect())
}
