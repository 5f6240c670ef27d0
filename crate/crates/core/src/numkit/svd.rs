//! Thin SVD for tall matrices through a cyclic Jacobi eigendecomposition of the
//! Gram matrix `XᵀX`.
//!
//! Singular values are `sqrt(max(λ, 0))` of the Gram eigenvalues. Left vectors,
//! when requested, are `X·v_i / σ_i`; columns with `σ_i = 0` are left zero,
//! which keeps `UΣVᵀ = X·V·Vᵀ` exact up to the orthogonality of `V`.

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const OFF_DIAG_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// `d×d`, columns are right singular vectors.
    pub right_vectors: Matrix,
    /// `n×d`, present when requested.
    pub left_vectors: Option<Matrix>,
}

impl SvdResult {
    /// `Σ_{i<k} σ_i² / Σ σ_i²`. Returns 1 for an all-zero input.
    pub fn retained_energy(&self, k: usize) -> f64 {
        let total: f64 = self.singular_values.iter().map(|s| s * s).sum();
        if total == 0.0 {
            return 1.0;
        }
        let head: f64 = self.singular_values.iter().take(k).map(|s| s * s).sum();
        head / total
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues sorted descending and the matching eigenvectors as
/// columns. Each eigenvector's largest-magnitude component is made positive so
/// the output is sign-deterministic.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape(
            "symmetric_eigen",
            format!("expected a square matrix, got {}x{}", a.rows(), a.cols()),
        ));
    }
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let norm = a.frobenius_norm();

    for _sweep in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= OFF_DIAG_TOL * norm || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = v.column(src);
        let pivot = col.iter().copied().fold(
            0.0_f64,
            |best, x| if x.abs() > best.abs() { x } else { best },
        );
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (k, x) in col.into_iter().enumerate() {
            vectors[(k, dst)] = sign * x;
        }
    }
    Ok((values, vectors))
}

/// Thin SVD of an `n×d` input with `n ≥ d`.
pub fn svd(input: &Matrix, want_left: bool) -> Result<SvdResult> {
    let (n, d) = input.shape();
    if n < d {
        return Err(Error::shape(
            "svd",
            format!("input is {n}x{d}; need rows >= cols"),
        ));
    }
    if !input.is_finite() {
        return Err(Error::Numeric("svd input has non-finite entries".into()));
    }
    let gram = input.t_matmul(input)?;
    let (eigenvalues, right) = symmetric_eigen(&gram)?;
    let singular_values: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();

    let left_vectors = if want_left {
        let xv = input.matmul(&right)?;
        let mut u = Matrix::zeros(n, d);
        for (j, &s) in singular_values.iter().enumerate() {
            if s > 0.0 {
                for i in 0..n {
                    u[(i, j)] = xv[(i, j)] / s;
                }
            }
        }
        Some(u)
    } else {
        None
    };

    Ok(SvdResult {
        singular_values,
        right_vectors: right,
        left_vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn reconstruct(r: &SvdResult) -> Matrix {
        let u = r.left_vectors.as_ref().unwrap();
        let mut us = u.clone();
        for i in 0..us.rows() {
            for (j, s) in r.singular_values.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul_t(&r.right_vectors).unwrap()
    }

    fn orthonormality_error(v: &Matrix) -> f64 {
        v.t_matmul(v)
            .unwrap()
            .max_abs_diff(&Matrix::identity(v.cols()))
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let r = svd(&Matrix::identity(4), true).unwrap();
        for s in &r.singular_values {
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn diagonal_input_gives_sorted_values_and_signed_permutation() {
        let r = svd(&Matrix::diag(&[1.0, 3.0, 2.0]), false).unwrap();
        assert_eq!(r.singular_values, vec![3.0, 2.0, 1.0]);
        for c in 0..3 {
            let col = r.right_vectors.column(c);
            let ones = col.iter().filter(|x| (x.abs() - 1.0).abs() < 1e-15).count();
            let zeros = col.iter().filter(|x| x.abs() < 1e-15).count();
            assert_eq!((ones, zeros), (1, 2));
        }
    }

    #[test]
    fn random_tall_matrix_reconstructs() {
        let x = Rng::new(5).normal_matrix(50, 8, 1.0);
        let r = svd(&x, true).unwrap();
        let rel = {
            let mut diff = reconstruct(&r);
            diff.axpy(-1.0, &x).unwrap();
            diff.frobenius_norm() / x.frobenius_norm()
        };
        assert!(rel <= 1e-8, "relative reconstruction error {rel}");
        assert!(orthonormality_error(&r.right_vectors) <= 1e-8);
        let energy: f64 = r.singular_values.iter().map(|s| s * s).sum();
        assert!((energy - x.frobenius_sq()).abs() <= 1e-8 * x.frobenius_sq());
        assert!(r.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn wide_input_is_rejected() {
        assert!(matches!(
            svd(&Matrix::zeros(3, 5), false),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn rank_deficient_input() {
        let mut rng = Rng::new(11);
        let a = rng.normal_matrix(30, 2, 1.0);
        let b = rng.normal_matrix(2, 6, 1.0);
        let x = a.matmul(&b).unwrap();
        let r = svd(&x, true).unwrap();
        assert!(r.singular_values[2] < 1e-6 * r.singular_values[0]);
        assert!((r.retained_energy(2) - 1.0).abs() < 1e-12);
        let mut diff = reconstruct(&r);
        diff.axpy(-1.0, &x).unwrap();
        assert!(diff.frobenius_norm() <= 1e-8 * x.frobenius_norm());
    }
}
