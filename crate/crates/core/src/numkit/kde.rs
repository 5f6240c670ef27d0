use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Bandwidth used when the samples have zero spread and Silverman's rule
/// would return zero.
const DEGENERATE_BANDWIDTH: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Silverman's rule of thumb, `1.06·σ̂·n^(-1/5)`.
    Silverman,
    Fixed(f64),
}

/// Silverman's rule with the unbiased sample standard deviation.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::usage(format!(
            "automatic bandwidth needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let h = 1.06 * var.sqrt() * n.powf(-0.2);
    Ok(if h > 0.0 { h } else { DEGENERATE_BANDWIDTH })
}

/// Gaussian kernel density estimate evaluated at each grid point.
pub fn kde_density(samples: &[f64], grid: &[f64], bandwidth: Bandwidth) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::usage("kde_density needs at least one sample"));
    }
    let h = match bandwidth {
        Bandwidth::Silverman => silverman_bandwidth(samples)?,
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => {
            return Err(Error::usage(format!("bandwidth must be positive, got {h}")))
        }
    };
    let norm = INV_SQRT_2PI / (h * samples.len() as f64);
    Ok(grid
        .iter()
        .map(|&x| {
            samples
                .iter()
                .map(|&s| {
                    let z = (x - s) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect())
}

/// `count` evenly spaced points over `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (count - 1) as f64;
            (0..count).map(|i| lo + step * i as f64).collect()
        }
    }
}

pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}
