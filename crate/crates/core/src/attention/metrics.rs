use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Probabilities are clamped into `[PROB_CLAMP, 1 − PROB_CLAMP]` for logloss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Click probabilities with their labels and owning users.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionBatch {
    pub probabilities: Vec<f64>,
    pub labels: Vec<f64>,
    pub users: Vec<u32>,
}

impl PredictionBatch {
    pub fn new(probabilities: Vec<f64>, labels: Vec<f64>, users: Vec<u32>) -> Result<Self> {
        if probabilities.len() != labels.len() || labels.len() != users.len() {
            return Err(Error::shape(
                "PredictionBatch",
                format!(
                    "{} probabilities, {} labels, {} users",
                    probabilities.len(),
                    labels.len(),
                    users.len()
                ),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::usage(format!("labels must be 0 or 1, got {bad}")));
        }
        Ok(Self {
            probabilities,
            labels,
            users,
        })
    }

    /// All examples attributed to a single user.
    pub fn single_user(probabilities: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        let users = vec![0; labels.len()];
        Self::new(probabilities, labels, users)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, probability: f64, label: f64, user: u32) {
        self.probabilities.push(probability);
        self.labels.push(label);
        self.users.push(user);
    }

    pub fn extend(&mut self, other: PredictionBatch) {
        self.probabilities.extend(other.probabilities);
        self.labels.extend(other.labels);
        self.users.extend(other.users);
    }
}

pub(crate) fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean binary cross-entropy over clamped probabilities.
pub fn bce_loss(pred: &PredictionBatch) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::UndefinedMetric("logloss of an empty batch".into()));
    }
    let total: f64 = pred
        .probabilities
        .iter()
        .zip(&pred.labels)
        .map(|(&p, &y)| {
            let p = clamp_probability(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

fn auc_of(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Mid-ranks over tie groups; ranks are 1-based.
    let mut positive_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let mid_rank = (start + 1 + end) as f64 / 2.0;
        let group_positives = order[start..end]
            .iter()
            .filter(|&&i| labels[i] == 1.0)
            .count();
        positive_rank_sum += mid_rank * group_positives as f64;
        start = end;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Some((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Area under the ROC curve by the sort-rank (Mann–Whitney) method; ties
/// count one half.
pub fn auc(pred: &PredictionBatch) -> Result<f64> {
    auc_of(&pred.probabilities, &pred.labels).ok_or_else(|| {
        Error::UndefinedMetric("AUC needs at least one positive and one negative label".into())
    })
}

/// O(n²) pairwise AUC. Kept public as an independent reference for the
/// sort-rank implementation.
pub fn auc_pairwise(pred: &PredictionBatch) -> Result<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &yi) in pred.labels.iter().enumerate() {
        if yi != 1.0 {
            continue;
        }
        for (j, &yj) in pred.labels.iter().enumerate() {
            if yj != 0.0 {
                continue;
            }
            pairs += 1.0;
            let (si, sj) = (pred.probabilities[i], pred.probabilities[j]);
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative label".into(),
        ));
    }
    Ok(wins / pairs)
}

/// Per-user AUC weighted by each user's example count. Users whose labels are
/// all one class are skipped.
pub fn gauc(pred: &PredictionBatch) -> Result<f64> {
    let mut groups: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((&p, &y), &u) in pred.probabilities.iter().zip(&pred.labels).zip(&pred.users) {
        let g = groups.entry(u).or_default();
        g.0.push(p);
        g.1.push(y);
    }
    let mut weighted = 0.0;
    let mut weight = 0.0;
    for (scores, labels) in groups.values() {
        if let Some(a) = auc_of(scores, labels) {
            let w = labels.len() as f64;
            weighted += w * a;
            weight += w;
        }
    }
    if weight == 0.0 {
        return Err(Error::UndefinedMetric(
            "GAUC needs at least one user with both labels".into(),
        ));
    }
    Ok(weighted / weight)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(p: &[f64], y: &[f64]) -> PredictionBatch {
        PredictionBatch::single_user(p.to_vec(), y.to_vec()).unwrap()
    }

    #[test]
    fn bce_anchors() {
        let perfect = batch(&[1.0, 0.0], &[1.0, 0.0]);
        assert!(bce_loss(&perfect).unwrap() <= 1.2e-7);
        let flat = batch(&[0.5; 4], &[1.0, 0.0, 0.0, 1.0]);
        assert!((bce_loss(&flat).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let hand = batch(&[0.9, 0.2], &[1.0, 0.0]);
        let expect = 0.5 * (-(0.9f64.ln()) - 0.8f64.ln());
        assert!((bce_loss(&hand).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.164252).abs() < 1e-6);
    }

    #[test]
    fn auc_anchors() {
        assert_eq!(
            auc(&batch(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0])).unwrap(),
            1.0
        );
        assert_eq!(
            auc(&batch(&[0.3; 5], &[0.0, 1.0, 0.0, 1.0, 1.0])).unwrap(),
            0.5
        );
        let hand = batch(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(auc(&hand).unwrap(), 0.75);
        assert_eq!(auc_pairwise(&hand).unwrap(), 0.75);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            auc(&batch(&[0.1, 0.2], &[1.0, 1.0])),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            gauc(&batch(&[0.1, 0.2], &[0.0, 0.0])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn gauc_hand_weighted() {
        let pred = PredictionBatch::new(
            vec![0.9, 0.1, 0.5, 0.5, 0.5, 0.5, 0.7],
            vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
            vec![1, 1, 2, 2, 2, 2, 3],
        )
        .unwrap();
        let g = gauc(&pred).unwrap();
        assert!((g - (2.0 * 1.0 + 4.0 * 0.5) / 6.0).abs() < 1e-12);
        assert!((g - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn gauc_single_user_equals_auc() {
        let pred = batch(&[0.2, 0.9, 0.4, 0.4, 0.1], &[0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(gauc(&pred).unwrap(), auc(&pred).unwrap());
    }

    #[test]
    fn rejects_bad_labels_and_lengths() {
        assert!(PredictionBatch::new(vec![0.5], vec![2.0], vec![0]).is_err());
        assert!(PredictionBatch::new(vec![0.5], vec![], vec![0]).is_err());
    }
}
