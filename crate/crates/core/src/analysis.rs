//! Shareability studies and router diagnostics.

use std::collections::BTreeSet;

use crate::cachesim::CacheEntry;
use crate::collective::Side;
use crate::error::{Error, Result};
use crate::numkit::{
    cosine, kde_density, linspace, silverman_bandwidth, svd, Bandwidth, Matrix, Rng,
};

/// Grid points of every emitted density curve.
pub const KDE_GRID_POINTS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Mean,
    Principal,
    Residual,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Mean => "mean",
            Variant::Principal => "principal",
            Variant::Residual => "residual",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KvTarget {
    Key,
    Value,
}

impl KvTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            KvTarget::Key => "key",
            KvTarget::Value => "value",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilaritySample {
    pub user_a: usize,
    pub user_b: usize,
    pub cosine: f64,
    pub variant: Variant,
    pub target: KvTarget,
}

/// Density estimate on an evenly spaced grid.
#[derive(Clone, Debug, PartialEq)]
pub struct KdeCurve {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

impl KdeCurve {
    /// Silverman-bandwidth KDE over `[min − 4h, max + 4h]`.
    pub fn fit(samples: &[f64]) -> Result<Self> {
        let h = silverman_bandwidth(samples)?;
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 4.0 * h;
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * h;
        let grid = linspace(lo, hi, KDE_GRID_POINTS);
        let density = kde_density(samples, &grid, Bandwidth::Fixed(h))?;
        Ok(Self {
            bandwidth: h,
            grid,
            density,
        })
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("grid,density\n");
        for (x, y) in self.grid.iter().zip(&self.density) {
            out.push_str(&format!("{x:.6},{y:.6}\n"));
        }
        out
    }
}

/// Spread statistics of a set of cosines.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilaritySummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub positive_fraction: f64,
    /// Fraction with `|cos| > 0.5`.
    pub strong_fraction: f64,
}

impl SimilaritySummary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::UndefinedMetric(
                "summary of zero similarity samples".into(),
            ));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len().is_multiple_of(2) {
            0.5 * (sorted[mid - 1] + sorted[mid])
        } else {
            sorted[mid]
        };
        Ok(Self {
            count: values.len(),
            mean,
            median,
            std: var.sqrt(),
            positive_fraction: values.iter().filter(|&&v| v > 0.0).count() as f64 / n,
            strong_fraction: values.iter().filter(|&&v| v.abs() > 0.5).count() as f64 / n,
        })
    }

    pub const CSV_HEADER: &'static str = "count,mean,median,std,positive_fraction,strong_fraction";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.count,
            self.mean,
            self.median,
            self.std,
            self.positive_fraction,
            self.strong_fraction
        )
    }
}

/// Samples of one variant, their density and summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityStudy {
    pub samples: Vec<SimilaritySample>,
    /// Pairs dropped because a mean vector was zero.
    pub skipped: usize,
    pub kde: KdeCurve,
    pub summary: SimilaritySummary,
}

impl SimilarityStudy {
    fn from_samples(samples: Vec<SimilaritySample>, skipped: usize) -> Result<Self> {
        let values: Vec<f64> = samples.iter().map(|s| s.cosine).collect();
        if values.len() < 2 {
            return Err(Error::usage(format!(
                "similarity study produced {} usable pairs; at least 2 are needed",
                values.len()
            )));
        }
        Ok(Self {
            kde: KdeCurve::fit(&values)?,
            summary: SimilaritySummary::of(&values)?,
            samples,
            skipped,
        })
    }

    pub fn cosines(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.cosine).collect()
    }

    pub fn samples_csv(&self) -> String {
        let mut out = String::from("user_a,user_b,variant,target,cosine\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{},{:.9}\n",
                s.user_a,
                s.user_b,
                s.variant.as_str(),
                s.target.as_str(),
                s.cosine
            ));
        }
        out
    }
}

/// Column means of `K`.
pub fn mean_kv(k: &Matrix) -> Result<Vec<f64>> {
    if k.rows() == 0 {
        return Err(Error::usage("mean_kv needs at least one row"));
    }
    Ok(k.col_means().into_vec())
}

fn pair_samples(
    vectors: &[Vec<f64>],
    anchors: &[usize],
    variant: Variant,
    target: KvTarget,
) -> Result<(Vec<SimilaritySample>, usize)> {
    let mut samples = Vec::new();
    let mut skipped = 0;
    for &a in anchors {
        if a >= vectors.len() {
            return Err(Error::usage(format!(
                "anchor {a} outside {} users",
                vectors.len()
            )));
        }
        for (b, v) in vectors.iter().enumerate() {
            if b == a {
                continue;
            }
            match cosine(&vectors[a], v) {
                Some(c) => samples.push(SimilaritySample {
                    user_a: a,
                    user_b: b,
                    cosine: c.clamp(-1.0, 1.0),
                    variant,
                    target,
                }),
                None => skipped += 1,
            }
        }
    }
    Ok((samples, skipped))
}

fn check_users(users: &[Matrix]) -> Result<()> {
    if users.len() < 2 {
        return Err(Error::usage(format!(
            "similarity needs at least 2 users, got {}",
            users.len()
        )));
    }
    Ok(())
}

/// Cosine between each anchor's mean K (or V) and every other user's.
/// Samples from several anchors are pooled.
pub fn cross_user_similarity(
    users: &[Matrix],
    anchors: &[usize],
    target: KvTarget,
) -> Result<SimilarityStudy> {
    check_users(users)?;
    let means = users.iter().map(mean_kv).collect::<Result<Vec<_>>>()?;
    let (samples, skipped) = pair_samples(&means, anchors, Variant::Mean, target)?;
    if skipped > 0 {
        log::warn!("{skipped} similarity pairs skipped for zero mean vectors");
    }
    SimilarityStudy::from_samples(samples, skipped)
}

/// Projections of `K` onto its top-`k` and remaining right-singular directions.
#[derive(Clone, Debug, PartialEq)]
pub struct PrincipalResidual {
    pub principal: Matrix,
    pub residual: Matrix,
    pub retained_fraction: f64,
}

pub fn principal_residual_split(k_mat: &Matrix, k: usize) -> Result<PrincipalResidual> {
    let (n, d) = k_mat.shape();
    if n < d {
        return Err(Error::shape(
            "principal_residual_split",
            format!("needs rows >= cols, got {n}x{d}"),
        ));
    }
    if k == 0 || k >= d {
        return Err(Error::usage(format!("k must be in [1, {}), got {k}", d)));
    }
    let s = svd(k_mat, false)?;
    let projected = k_mat.matmul(&s.right_vectors)?;
    Ok(PrincipalResidual {
        principal: projected.slice_cols(0, k),
        residual: projected.slice_cols(k, d),
        retained_fraction: s.retained_energy(k),
    })
}

/// Principal and residual similarity studies plus per-user retained energy.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitStudy {
    pub principal: SimilarityStudy,
    pub residual: SimilarityStudy,
    pub retained_fractions: Vec<f64>,
}

pub fn split_similarity_study(
    users: &[Matrix],
    k: usize,
    anchors: &[usize],
    target: KvTarget,
) -> Result<SplitStudy> {
    check_users(users)?;
    let mut principal = Vec::with_capacity(users.len());
    let mut residual = Vec::with_capacity(users.len());
    let mut retained = Vec::with_capacity(users.len());
    for u in users {
        let split = principal_residual_split(u, k)?;
        principal.push(mean_kv(&split.principal)?);
        residual.push(mean_kv(&split.residual)?);
        retained.push(split.retained_fraction);
    }
    let (ps, pskip) = pair_samples(&principal, anchors, Variant::Principal, target)?;
    let (rs, rskip) = pair_samples(&residual, anchors, Variant::Residual, target)?;
    Ok(SplitStudy {
        principal: SimilarityStudy::from_samples(ps, pskip)?,
        residual: SimilarityStudy::from_samples(rs, rskip)?,
        retained_fractions: retained,
    })
}

/// Activation counts of pool indices in fixed-width bins over `[0, m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationHistogram {
    pub bin_size: usize,
    pub pool_size: usize,
    pub counts: Vec<u64>,
}

impl ActivationHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Largest bin's share of all activations (0 when empty).
    pub fn max_share(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        *self.counts.iter().max().unwrap() as f64 / total as f64
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (b, c) in self.counts.iter().enumerate() {
            let start = b * self.bin_size;
            let end = (start + self.bin_size).min(self.pool_size);
            out.push_str(&format!("{start},{end},{c}\n"));
        }
        out
    }
}

fn entry_indices(entry: &CacheEntry, side: Side) -> &[u32] {
    match side {
        Side::Keys => &entry.key_indices,
        Side::Values => &entry.value_indices,
    }
}

/// Histogram of the given sides' indices. Indices at or beyond `pool_size`
/// extend the last bin range.
pub fn activation_histogram(
    entries: &[CacheEntry],
    bin_size: usize,
    pool_size: usize,
    sides: &[Side],
) -> Result<ActivationHistogram> {
    if bin_size == 0 {
        return Err(Error::usage("bin_size must be at least 1"));
    }
    let max_index = entries
        .iter()
        .flat_map(|e| sides.iter().flat_map(move |&s| entry_indices(e, s).iter()))
        .map(|&i| i as usize + 1)
        .max()
        .unwrap_or(0);
    let span = pool_size.max(max_index);
    let mut counts = vec![0u64; span.div_ceil(bin_size)];
    for e in entries {
        for &s in sides {
            for &i in entry_indices(e, s) {
                counts[i as usize / bin_size] += 1;
            }
        }
    }
    Ok(ActivationHistogram {
        bin_size,
        pool_size: span,
        counts,
    })
}

/// `|A ∩ B| / min(|A|, |B|)` over unique index sets.
pub fn overlap_ratio(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::usage(
            "overlap_ratio needs two non-empty index lists",
        ));
    }
    let sa: BTreeSet<u32> = a.iter().copied().collect();
    let sb: BTreeSet<u32> = b.iter().copied().collect();
    let inter = sa.intersection(&sb).count();
    Ok(inter as f64 / sa.len().min(sb.len()) as f64)
}

/// Overlap of two entries' indices on one side.
pub fn entry_overlap_ratio(a: &CacheEntry, b: &CacheEntry, side: Side) -> Result<f64> {
    overlap_ratio(entry_indices(a, side), entry_indices(b, side))
}

/// Same-group pairs whose mean-embedding cosine is at least `min_cosine`, and
/// random cross-group pairs, `count` of each (fewer if not enough exist).
/// Pairs are drawn by scanning a seed-shuffled order of all pairs.
pub fn sample_pairs(
    groups: &[u32],
    means: &[Vec<f64>],
    count: usize,
    min_cosine: f64,
    rng: &mut Rng,
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let n = groups.len().min(means.len());
    let mut pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| ((a + 1)..n).map(move |b| (a, b)))
        .collect();
    rng.shuffle(&mut pairs);
    let mut same = Vec::new();
    let mut cross = Vec::new();
    for (a, b) in pairs {
        if same.len() >= count && cross.len() >= count {
            break;
        }
        if groups[a] == groups[b] {
            if same.len() < count && cosine(&means[a], &means[b]).is_some_and(|c| c >= min_cosine) {
                same.push((a, b));
            }
        } else if cross.len() < count {
            cross.push((a, b));
        }
    }
    (same, cross)
}

/// The `round(rate·|users|)` users (at least one) with the shortest
/// histories, ties broken by position; returned in their original order.
pub fn longtail_slice(lengths: &[(u32, usize)], rate: f64) -> Result<Vec<u32>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::usage(format!(
            "longtail rate must be in (0, 1], got {rate}"
        )));
    }
    let keep = ((rate * lengths.len() as f64).round() as usize).clamp(1, lengths.len().max(1));
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i].1, i));
    let mut chosen: Vec<usize> = order.into_iter().take(keep).collect();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| lengths[i].0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_kv_examples() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(mean_kv(&m).unwrap(), vec![2.0, 3.0]);
        let sym = Matrix::from_rows(&[vec![1.5, -2.0], vec![-1.5, 2.0]]);
        assert_eq!(mean_kv(&sym).unwrap(), vec![0.0, 0.0]);
        assert!(mean_kv(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn overlap_examples() {
        let a = [1, 2, 3, 4, 5, 6, 7, 7, 1];
        let b = [1, 2, 3, 4, 5, 6, 9];
        assert!((overlap_ratio(&a, &b).unwrap() - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(overlap_ratio(&[3, 1], &[1, 3, 3]).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&[0, 1], &[2, 3]).unwrap(), 0.0);
        assert!(overlap_ratio(&[], &[1]).is_err());
    }

    #[test]
    fn longtail_examples() {
        let lengths = [(10, 5), (11, 3), (12, 9), (13, 3)];
        assert_eq!(longtail_slice(&lengths, 1.0).unwrap(), vec![10, 11, 12, 13]);
        assert_eq!(longtail_slice(&lengths, 0.25).unwrap(), vec![11]);
        assert_eq!(longtail_slice(&lengths, 0.5).unwrap(), vec![11, 13]);
        assert!(longtail_slice(&lengths, 0.0).is_err());
        assert!(longtail_slice(&lengths, 1.5).is_err());
    }

    #[test]
    fn split_rejects_bad_shapes() {
        assert!(principal_residual_split(&Matrix::zeros(3, 4), 1).is_err());
        assert!(principal_residual_split(&Matrix::identity(4), 0).is_err());
        assert!(principal_residual_split(&Matrix::identity(4), 4).is_err());
    }
}
