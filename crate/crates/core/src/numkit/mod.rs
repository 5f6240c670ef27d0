//! Small dense numeric kernel: matrices, seeded randomness, Jacobi SVD, KDE,
//! Adam and finite-difference gradient checks.

mod adam;
mod gradcheck;
mod kde;
mod matrix;
mod rng;
mod svd;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{check_gradient, FD_STEP};
pub use kde::{kde_density, linspace, silverman_bandwidth, trapezoid, Bandwidth};
pub use matrix::{cosine, dot, matmul, Matrix};
pub use rng::{derive_seed, Rng};
pub use svd::{svd, symmetric_eigen, SvdResult};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)`, stable for large |x|.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_into(row, &mut out);
    out
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        softmax_into(m.row(r), out.row_mut(r));
    }
    out
}
