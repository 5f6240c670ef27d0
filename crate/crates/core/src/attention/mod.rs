//! Host attention models that consume the constructed K/V, plus CTR metrics.

mod metrics;
mod model;

pub use metrics::{auc, auc_pairwise, bce_loss, gauc, PredictionBatch, PROB_CLAMP};
pub use model::{
    AttentionConfig, AttentionMode, AttentionParams, CtrModel, LossBreakdown, ModelConfig,
    ModelParams, SequenceBatch, TargetScore,
};

use crate::error::{Error, Result};
use crate::numkit::{dot, softmax_into, Matrix};

fn check_kv(op: &'static str, query_cols: usize, keys: &Matrix, values: &Matrix) -> Result<()> {
    if keys.cols() != query_cols || values.cols() != query_cols || keys.rows() != values.rows() {
        return Err(Error::shape(
            op,
            format!(
                "query width {query_cols}, keys {}x{}, values {}x{}",
                keys.rows(),
                keys.cols(),
                values.rows(),
                values.cols()
            ),
        ));
    }
    Ok(())
}

/// Attention weights and output for one query row over `rows` of K/V.
pub(crate) fn attend(
    query: &[f64],
    keys: &Matrix,
    values: &Matrix,
    rows: usize,
) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (query.len() as f64).sqrt();
    let scores: Vec<f64> = (0..rows).map(|i| scale * dot(query, keys.row(i))).collect();
    let mut weights = vec![0.0; rows];
    softmax_into(&scores, &mut weights);
    let mut out = vec![0.0; values.cols()];
    for (i, &w) in weights.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(values.row(i)) {
            *o += w * v;
        }
    }
    (weights, out)
}

/// `softmax(q·Kᵀ/√d_a)·V` for a single query row.
pub fn target_attention(query: &Matrix, keys: &Matrix, values: &Matrix) -> Result<Matrix> {
    if query.rows() != 1 {
        return Err(Error::shape(
            "target_attention",
            format!("query must be one row, got {}", query.rows()),
        ));
    }
    check_kv("target_attention", query.cols(), keys, values)?;
    if keys.rows() == 0 {
        return Err(Error::shape("target_attention", "no keys to attend over"));
    }
    let (_, out) = attend(query.row(0), keys, values, keys.rows());
    Ok(Matrix::row_vector(&out))
}

/// Scaled dot-product self-attention; with `causal`, row `i` sees rows `0..=i`.
pub fn self_attention(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    causal: bool,
) -> Result<Matrix> {
    check_kv("self_attention", queries.cols(), keys, values)?;
    if queries.rows() != keys.rows() {
        return Err(Error::shape(
            "self_attention",
            format!("{} queries for {} keys", queries.rows(), keys.rows()),
        ));
    }
    let mut out = Matrix::zeros(queries.rows(), values.cols());
    for i in 0..queries.rows() {
        let visible = if causal { i + 1 } else { keys.rows() };
        let (_, row) = attend(queries.row(i), keys, values, visible);
        out.row_mut(i).copy_from_slice(&row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn oracle_row(q: &[f64], k: &Matrix, v: &Matrix, visible: usize) -> Vec<f64> {
        let d = q.len() as f64;
        let mut scores = Vec::new();
        for i in 0..visible {
            let mut s = 0.0;
            for j in 0..q.len() {
                s += q[j] * k[(i, j)];
            }
            scores.push(s / d.sqrt());
        }
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut out = vec![0.0; v.cols()];
        for i in 0..visible {
            for j in 0..v.cols() {
                out[j] += e[i] / z * v[(i, j)];
            }
        }
        out
    }

    #[test]
    fn singleton_returns_value_row() {
        let mut rng = Rng::new(1);
        let q = rng.normal_matrix(1, 4, 1.0);
        let k = rng.normal_matrix(1, 4, 1.0);
        let v = rng.normal_matrix(1, 4, 1.0);
        assert_eq!(target_attention(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = Rng::new(2);
        let q = rng.normal_matrix(1, 3, 1.0);
        let row = rng.normal_matrix(1, 3, 1.0);
        let k = row.vstack(&row).unwrap().vstack(&row).unwrap();
        let v = rng.normal_matrix(3, 3, 1.0);
        let out = target_attention(&q, &k, &v).unwrap();
        let mean = v.col_means();
        assert!(out.max_abs_diff(&mean) <= 1e-15);
    }

    #[test]
    fn target_matches_scalar_oracle() {
        let mut rng = Rng::new(3);
        let q = rng.normal_matrix(1, 5, 1.0);
        let k = rng.normal_matrix(3, 5, 1.0);
        let v = rng.normal_matrix(3, 5, 1.0);
        let out = target_attention(&q, &k, &v).unwrap();
        let expect = oracle_row(q.row(0), &k, &v, 3);
        assert!(out.max_abs_diff(&Matrix::row_vector(&expect)) <= 1e-12);
    }

    #[test]
    fn causal_first_row_and_zero_values() {
        let mut rng = Rng::new(4);
        let q = rng.normal_matrix(4, 3, 1.0);
        let k = rng.normal_matrix(4, 3, 1.0);
        let v = rng.normal_matrix(4, 3, 1.0);
        let out = self_attention(&q, &k, &v, true).unwrap();
        assert_eq!(out.row(0), v.row(0));
        let z = self_attention(&q, &k, &Matrix::zeros(4, 3), true).unwrap();
        assert_eq!(z, Matrix::zeros(4, 3));
    }

    #[test]
    fn self_matches_masked_oracle() {
        let mut rng = Rng::new(5);
        let q = rng.normal_matrix(4, 6, 1.0);
        let k = rng.normal_matrix(4, 6, 1.0);
        let v = rng.normal_matrix(4, 6, 1.0);
        for causal in [true, false] {
            let out = self_attention(&q, &k, &v, causal).unwrap();
            for i in 0..4 {
                let visible = if causal { i + 1 } else { 4 };
                let expect = oracle_row(q.row(i), &k, &v, visible);
                for j in 0..6 {
                    assert!((out[(i, j)] - expect[j]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let k = Matrix::zeros(3, 4);
        assert!(target_attention(&Matrix::zeros(1, 3), &k, &k).is_err());
        assert!(target_attention(&Matrix::zeros(2, 4), &k, &k).is_err());
        assert!(self_attention(&Matrix::zeros(2, 4), &k, &k, true).is_err());
    }
}
