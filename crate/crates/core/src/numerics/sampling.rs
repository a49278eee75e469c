use rand::RngCore;
use rayon::prelude::*;

use super::{sym_eig, DenseMatrix, NumericsError, RngStream};

const PSD_TOL: f64 = 1e-10;
/// Rows per independently seeded chunk; fixes the draw layout regardless of threads.
const CHUNK_ROWS: usize = 1024;

/// Covariance argument for [`sample_gaussian`].
#[derive(Debug, Clone)]
pub enum Covariance<'a> {
    /// `scale · I_d`.
    Isotropic {
        dim: usize,
        scale: f64,
    },
    Full(&'a DenseMatrix),
}

/// `count × d` matrix of N(0, I) draws.
pub fn sample_standard_gaussian(rng: &mut RngStream, count: usize, dim: usize) -> DenseMatrix {
    let root = RngStream::new(rng.next_u64());
    let chunks: Vec<Vec<f64>> = (0..count.div_ceil(CHUNK_ROWS))
        .into_par_iter()
        .map(|c| {
            let mut local = root.derive(c as u64);
            let rows = CHUNK_ROWS.min(count - c * CHUNK_ROWS);
            (0..rows * dim).map(|_| local.gaussian()).collect()
        })
        .collect();
    let data = chunks.concat();
    DenseMatrix::from_vec(count, dim, data).expect("shape is consistent")
}

/// Rows are i.i.d. N(0, cov). A symmetric square-root factor is used so that
/// semi-definite covariances are handled exactly.
pub fn sample_gaussian(
    rng: &mut RngStream,
    cov: Covariance<'_>,
    count: usize,
) -> Result<DenseMatrix, NumericsError> {
    match cov {
        Covariance::Isotropic { dim, scale } => {
            if scale < 0.0 || !scale.is_finite() {
                return Err(NumericsError::NotPsd { eigenvalue: scale });
            }
            Ok(sample_standard_gaussian(rng, count, dim).scale(scale.sqrt()))
        }
        Covariance::Full(c) => {
            let factor = psd_factor(c)?;
            let z = sample_standard_gaussian(rng, count, c.rows());
            // rows x = Fᵀ z with F the factor below: x = z · Fᵀ
            z.matmul(&factor.transpose())
        }
    }
}

/// Returns `F` with `F Fᵀ = c`, clamping eigenvalues in `[-tol·scale, 0)` to zero.
pub(crate) fn psd_factor(c: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
    let eig = sym_eig(c)?;
    let scale = c.frobenius_norm().max(1.0);
    let n = c.rows();
    let mut roots = Vec::with_capacity(n);
    for &l in &eig.eigenvalues {
        if l < -PSD_TOL * scale {
            return Err(NumericsError::NotPsd { eigenvalue: l });
        }
        roots.push(l.max(0.0).sqrt());
    }
    Ok(DenseMatrix::from_fn(n, n, |i, j| {
        eig.eigenvectors[(i, j)] * roots[j]
    }))
}

/// `count` points uniform on the sphere of the given radius in `R^dim`.
pub fn sample_sphere(
    rng: &mut RngStream,
    radius: f64,
    dim: usize,
    count: usize,
) -> Result<DenseMatrix, NumericsError> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(NumericsError::InvalidArgument(format!(
            "sphere radius must be positive, got {radius}"
        )));
    }
    if dim == 0 {
        return Err(NumericsError::InvalidArgument(
            "sphere dimension must be >= 1".into(),
        ));
    }
    let mut z = sample_standard_gaussian(rng, count, dim);
    for i in 0..count {
        let row = z.row_mut(i);
        let mut nrm = super::norm2(row);
        // Zero vector has probability zero; guard anyway.
        if nrm == 0.0 {
            row[0] = 1.0;
            nrm = 1.0;
        }
        let s = radius / nrm;
        row.iter_mut().for_each(|v| *v *= s);
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_covariance_lln() {
        let mut rng = RngStream::new(11);
        let x = sample_gaussian(
            &mut rng,
            Covariance::Full(&DenseMatrix::identity(3)),
            100_000,
        )
        .unwrap();
        let cov = x.transpose().matmul(&x).unwrap().scale(1.0 / 100_000.0);
        assert!(cov.max_abs_diff(&DenseMatrix::identity(3)) < 0.05);
    }

    #[test]
    fn zero_covariance_gives_zero() {
        let mut rng = RngStream::new(5);
        let x = sample_gaussian(&mut rng, Covariance::Full(&DenseMatrix::zeros(4, 4)), 50).unwrap();
        assert!(x.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_under_seed() {
        let a = sample_standard_gaussian(&mut RngStream::new(9), 3000, 4);
        let b = sample_standard_gaussian(&mut RngStream::new(9), 3000, 4);
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_across_thread_pools() {
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| sample_standard_gaussian(&mut RngStream::new(21), 5000, 3))
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn rejects_indefinite() {
        let c = DenseMatrix::from_diag(&[1.0, -0.5]);
        assert!(matches!(
            sample_gaussian(&mut RngStream::new(0), Covariance::Full(&c), 10),
            Err(NumericsError::NotPsd { .. })
        ));
    }

    #[test]
    fn sphere_norms() {
        let x = sample_sphere(&mut RngStream::new(2), 1.0, 7, 100).unwrap();
        for r in x.row_iter() {
            assert!((crate::numerics::norm2(r) - 1.0).abs() < 1e-12);
        }
        let w = sample_sphere(&mut RngStream::new(2), 4.0, 16, 100).unwrap();
        for r in w.row_iter() {
            assert!((crate::numerics::norm2(r) - 4.0).abs() < 4e-12);
        }
    }

    #[test]
    fn circle_angles_uniform_ks() {
        let n = 100_000;
        let x = sample_sphere(&mut RngStream::new(13), 1.0, 2, n).unwrap();
        let mut u: Vec<f64> = x
            .row_iter()
            .map(|r| (r[1].atan2(r[0]) + std::f64::consts::PI) / (2.0 * std::f64::consts::PI))
            .collect();
        u.sort_by(f64::total_cmp);
        let d = u
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let lo = v - i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64 - v;
                lo.max(hi)
            })
            .fold(0.0, f64::max);
        // 1% critical value of the one-sample KS statistic.
        let crit = 1.628 / (n as f64).sqrt();
        assert!(d < crit, "KS statistic {d} exceeds {crit}");
    }
}
