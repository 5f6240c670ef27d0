use collectivekv::analysis::{
    activation_histogram, cross_user_similarity, longtail_slice, mean_kv, overlap_ratio,
    principal_residual_split, sample_pairs, KdeCurve, KvTarget, SimilaritySummary,
};
use collectivekv::cachesim::{CacheEntry, StorageWidths};
use collectivekv::collective::Side;
use collectivekv::numkit::{cosine, trapezoid, Matrix, Rng};

#[test]
fn similarity_is_symmetric_and_bounded() {
    let mut rng = Rng::new(1);
    let users: Vec<Matrix> = (0..6).map(|_| rng.normal_matrix(5, 4, 1.0)).collect();
    let study = cross_user_similarity(&users, &[0, 1, 2, 3, 4, 5], KvTarget::Key).unwrap();
    assert_eq!(study.samples.len(), 30);
    for s in &study.samples {
        let twin = study
            .samples
            .iter()
            .find(|t| t.user_a == s.user_b && t.user_b == s.user_a)
            .unwrap();
        assert_eq!(s.cosine, twin.cosine);
        assert!((-1.0..=1.0).contains(&s.cosine));
    }
}

#[test]
fn mean_similarity_matches_hand_cosine() {
    let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 2.0]]);
    let b = Matrix::from_rows(&[vec![0.0, 3.0]]);
    assert_eq!(mean_kv(&a).unwrap(), vec![1.0, 1.0]);
    let study = cross_user_similarity(&[a, b], &[0, 1], KvTarget::Value).unwrap();
    assert_eq!(study.samples.len(), 2);
    assert!(study
        .samples
        .iter()
        .all(|s| (s.cosine - 0.5_f64.sqrt()).abs() < 1e-12));
    assert!(mean_kv(&Matrix::zeros(0, 2)).is_err());
}

#[test]
fn zero_mean_pairs_are_skipped() {
    let users = vec![
        Matrix::zeros(2, 3),
        Matrix::filled(2, 3, 1.0),
        Matrix::filled(1, 3, 2.0),
    ];
    let study = cross_user_similarity(&users, &[0, 1, 2], KvTarget::Key).unwrap();
    assert_eq!(study.skipped, 4);
    assert_eq!(study.samples.len(), 2);
    assert!(study.samples.iter().all(|s| (s.cosine - 1.0).abs() < 1e-12));
}

#[test]
fn principal_residual_energy_split() {
    let mut rng = Rng::new(2);
    let k = rng.normal_matrix(30, 8, 1.0);
    let mut last = 0.0;
    for rank in 1..8 {
        let s = principal_residual_split(&k, rank).unwrap();
        let total = k.frobenius_sq();
        assert!(
            (s.principal.frobenius_sq() + s.residual.frobenius_sq() - total).abs() / total < 1e-10
        );
        assert!((s.principal.frobenius_sq() / total - s.retained_fraction).abs() < 1e-10);
        assert!(s.retained_fraction >= last);
        last = s.retained_fraction;
    }
    assert!(principal_residual_split(&k, 0).is_err());
    assert!(principal_residual_split(&k, 8).is_err());
    assert!(principal_residual_split(&rng.normal_matrix(3, 8, 1.0), 2).is_err());
}

#[test]
fn rank_one_input_has_empty_residual() {
    let u = [1.0, 2.0, -1.0, 0.5];
    let v = [3.0, 0.0, 1.0];
    let rows: Vec<Vec<f64>> = u
        .iter()
        .map(|a| v.iter().map(|b| a * b).collect())
        .collect();
    let s = principal_residual_split(&Matrix::from_rows(&rows), 1).unwrap();
    assert!((s.retained_fraction - 1.0).abs() < 1e-12);
    assert!(s.residual.max_abs() < 1e-9);
}

#[test]
fn summary_examples() {
    let s = SimilaritySummary::of(&[-0.5, 0.2, 0.6, 0.9]).unwrap();
    assert_eq!(s.count, 4);
    assert!((s.median - 0.4).abs() < 1e-12);
    assert!((s.mean - 0.3).abs() < 1e-12);
    assert_eq!(s.positive_fraction, 0.75);
    assert_eq!(s.strong_fraction, 0.5);
    assert!(SimilaritySummary::of(&[]).is_err());
}

#[test]
fn kde_curve_is_a_density() {
    let mut rng = Rng::new(3);
    let xs: Vec<f64> = (0..200).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let curve = KdeCurve::fit(&xs).unwrap();
    assert_eq!(curve.grid.len(), 256);
    assert!((trapezoid(&curve.grid, &curve.density) - 1.0).abs() < 1e-3);
}

fn entry(keys: &[u32], values: &[u32]) -> CacheEntry {
    CacheEntry {
        user_id: "e".into(),
        user_keys: Matrix::zeros(keys.len(), 1),
        user_values: Matrix::zeros(keys.len(), 1),
        key_indices: keys.to_vec(),
        value_indices: values.to_vec(),
        widths: StorageWidths::default(),
    }
}

#[test]
fn histogram_counts_and_share() {
    let entries = [entry(&[0, 1, 5, 7], &[2, 2, 9, 9]), entry(&[3, 3], &[4, 4])];
    let h = activation_histogram(&entries, 4, 12, &[Side::Keys]).unwrap();
    assert_eq!(h.counts, vec![4, 2, 0]);
    assert_eq!(h.total(), 6);
    assert!((h.max_share() - 4.0 / 6.0).abs() < 1e-12);
    let both = activation_histogram(&entries, 4, 12, &[Side::Keys, Side::Values]).unwrap();
    assert_eq!(both.counts, vec![6, 4, 2]);
    assert!(activation_histogram(&entries, 0, 12, &[Side::Keys]).is_err());
}

#[test]
fn overlap_examples() {
    assert_eq!(overlap_ratio(&[1, 2, 3], &[3, 4]).unwrap(), 0.5);
    assert_eq!(overlap_ratio(&[1, 1, 2], &[1, 2, 2, 9]).unwrap(), 1.0);
    assert_eq!(overlap_ratio(&[1], &[2]).unwrap(), 0.0);
    assert!(overlap_ratio(&[], &[2]).is_err());
}

#[test]
fn pair_sampling_respects_groups_and_threshold() {
    let groups = [0, 0, 0, 1, 1, 1];
    let means = vec![
        vec![1.0, 0.0],
        vec![1.0, 0.1],
        vec![0.0, 1.0],
        vec![-1.0, 0.0],
        vec![-1.0, 0.2],
        vec![0.3, -1.0],
    ];
    let (same, cross) = sample_pairs(&groups, &means, 10, 0.8, &mut Rng::new(4));
    for &(a, b) in &same {
        assert_eq!(groups[a], groups[b]);
        assert!(cosine(&means[a], &means[b]).unwrap() >= 0.8);
    }
    assert_eq!(same.len(), 2);
    assert_eq!(cross.len(), 9);
    assert!(cross.iter().all(|&(a, b)| groups[a] != groups[b]));
}

#[test]
fn longtail_examples() {
    let lengths = [(10, 50), (11, 5), (12, 30), (13, 5), (14, 100)];
    assert_eq!(longtail_slice(&lengths, 0.4).unwrap(), vec![11, 13]);
    assert_eq!(longtail_slice(&lengths, 0.01).unwrap(), vec![11]);
    assert_eq!(
        longtail_slice(&lengths, 1.0).unwrap(),
        vec![10, 11, 12, 13, 14]
    );
    assert!(longtail_slice(&lengths, 0.0).is_err());
    assert!(longtail_slice(&lengths, 1.5).is_err());
}
