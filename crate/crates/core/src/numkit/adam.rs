use super::Matrix;
use crate::error::{Error, Result};

/// Bias-corrected Adam moments for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_param(param: &Matrix, learning_rate: f64) -> Self {
        Self::new(param.rows(), param.cols(), learning_rate)
    }
}

pub fn adam_step(param: &mut Matrix, grad: &Matrix, state: &mut AdamState) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.first_moment.shape() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "param {:?}, grad {:?}, moments {:?}",
                param.shape(),
                grad.shape(),
                state.first_moment.shape()
            ),
        ));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let m = state.first_moment.as_mut_slice();
    let v = state.second_moment.as_mut_slice();
    for (((p, &g), mi), vi) in param
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *p -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = Matrix::from_rows(&[vec![1.0, -2.0]]);
        let before = p.clone();
        let mut st = AdamState::for_param(&p, 0.1);
        adam_step(&mut p, &Matrix::zeros(1, 2), &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_sign() {
        let mut p = Matrix::zeros(1, 3);
        let g = Matrix::from_rows(&[vec![3.0, -0.2, 50.0]]);
        let mut st = AdamState::for_param(&p, 0.01);
        st.epsilon = 0.0;
        adam_step(&mut p, &g, &mut st).unwrap();
        let expect = [-0.01, 0.01, -0.01];
        for (a, b) in p.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut x = Matrix::from_rows(&[vec![5.0]]);
        let mut st = AdamState::for_param(&x, 0.1);
        for _ in 0..500 {
            let g = x.map(|v| 2.0 * v);
            adam_step(&mut x, &g, &mut st).unwrap();
        }
        assert!(x[(0, 0)].abs() < 0.1, "x = {}", x[(0, 0)]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Matrix::zeros(2, 2);
        let mut st = AdamState::for_param(&p, 0.1);
        assert!(adam_step(&mut p, &Matrix::zeros(1, 2), &mut st).is_err());
    }
}
