//! Symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Each sweep visits every off-diagonal pair `(p, q)` once and annihilates it with a
//! plane rotation. Iteration stops once the off-diagonal Frobenius norm drops below
//! `1e-12 · ‖A‖_F`. Eigenvectors are accumulated as rows of an orthogonal matrix so
//! that each rotation touches two contiguous rows.

use super::{DenseMatrix, NumericsError};

/// Largest dimension accepted by [`sym_eig`].
pub const MAX_EIG_DIM: usize = 4096;

const SYMMETRY_TOL: f64 = 1e-10;
const OFF_DIAG_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix, sorted by non-increasing eigenvalue.
#[derive(Debug, Clone)]
pub struct SymEigResult {
    pub eigenvalues: Vec<f64>,
    /// Column `j` is the unit eigenvector for `eigenvalues[j]`.
    pub eigenvectors: DenseMatrix,
}

impl SymEigResult {
    pub fn eigenvector(&self, j: usize) -> Vec<f64> {
        self.eigenvectors.column(j)
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// `V · diag(λ) · Vᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        DenseMatrix::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| v[(i, k)] * self.eigenvalues[k] * v[(j, k)])
                .sum()
        })
    }
}

pub fn sym_eig(a: &DenseMatrix) -> Result<SymEigResult, NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    if n > MAX_EIG_DIM {
        return Err(NumericsError::DimensionTooLarge {
            dim: n,
            max: MAX_EIG_DIM,
        });
    }
    let scale = a.frobenius_norm();
    if !scale.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    let asym = a.max_asymmetry();
    if asym > SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(NumericsError::NonSymmetric {
            asymmetry: asym,
            scale,
        });
    }

    // Work on the symmetrized copy.
    let mut m = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    // Rows of `vt` are the eigenvectors.
    let mut vt = DenseMatrix::identity(n);

    let threshold = OFF_DIAG_TOL * scale;
    for _sweep in 0..MAX_SWEEPS {
        if off_diagonal_norm(&m) <= threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                rotate(&mut m, &mut vt, p, q);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag = m.diagonal();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));
    let eigenvalues = order.iter().map(|&i| diag[i]).collect();
    let eigenvectors = DenseMatrix::from_fn(n, n, |row, col| vt[(order[col], row)]);
    Ok(SymEigResult {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm(m: &DenseMatrix) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Applies the rotation zeroing `m[(p, q)]`, then updates the eigenvector rows.
fn rotate(m: &mut DenseMatrix, vt: &mut DenseMatrix, p: usize, q: usize) {
    let n = m.rows();
    let apq = m[(p, q)];
    let app = m[(p, p)];
    let aqq = m[(q, q)];
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = m[(k, p)];
        let akq = m[(k, q)];
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        m[(k, p)] = new_kp;
        m[(p, k)] = new_kp;
        m[(k, q)] = new_kq;
        m[(q, k)] = new_kq;
    }
    m[(p, p)] = app - t * apq;
    m[(q, q)] = aqq + t * apq;
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;

    let (row_p, row_q) = vt.two_rows_mut(p, q);
    for (vp, vq) in row_p.iter_mut().zip(row_q.iter_mut()) {
        let a = *vp;
        let b = *vq;
        *vp = c * a - s * b;
        *vq = s * a + c * b;
    }
}
