use collectivekv::attention::{auc, PredictionBatch};
use collectivekv::numkit::{cosine, dot};
use collectivekv::synthdata::{generate, split, SynthConfig, SynthDataset};

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        num_users: 80,
        num_items: 300,
        min_len: 10,
        max_len: 30,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn same_seed_same_dataset() {
    let a = generate(&small(3)).unwrap();
    let b = generate(&small(3)).unwrap();
    assert_eq!(a, b);
    let c = generate(&small(4)).unwrap();
    assert_ne!(a.item_embeddings, c.item_embeddings);
}

#[test]
fn shapes_and_ranges() {
    let cfg = small(5);
    let d = generate(&cfg).unwrap();
    assert_eq!(d.item_embeddings.shape(), (cfg.num_items, cfg.embed_dim));
    assert_eq!(d.item_latents.shape(), (cfg.num_items, cfg.latent_rank));
    for u in &d.users {
        assert!((cfg.min_len..=cfg.max_len).contains(&u.history.len()));
        assert_eq!(u.targets.len(), cfg.targets_per_user);
        assert_eq!(u.labels.len(), cfg.targets_per_user);
        assert!(u.labels.iter().all(|&y| y <= 1));
        assert!(u
            .history
            .iter()
            .chain(&u.targets)
            .all(|&i| (i as usize) < cfg.num_items));
        assert!((u.group as usize) < cfg.num_groups);
    }
}

#[test]
fn split_is_disjoint_covering_and_stable() {
    let d = generate(&small(6)).unwrap();
    let s = split(&d, 0.8).unwrap();
    assert_eq!(s.train.len(), 64);
    let mut all: Vec<u32> = s.train.iter().chain(&s.eval).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..80).collect::<Vec<u32>>());
    assert_eq!(s.checksum(), split(&d, 0.8).unwrap().checksum());
    assert!(split(&d, 1.0).is_err());
    assert!(split(&d, 0.001).is_err());
}

#[test]
fn groups_share_more_than_strangers() {
    let d = generate(&SynthConfig {
        num_users: 200,
        ..small(7)
    })
    .unwrap();
    let means = d.mean_embeddings();
    let (mut within, mut across) = (Vec::new(), Vec::new());
    for a in 0..d.users.len() {
        for b in a + 1..d.users.len() {
            let c = cosine(&means[a], &means[b]).unwrap();
            if d.users[a].group == d.users[b].group {
                within.push(c);
            } else {
                across.push(c);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&within) - mean(&across) >= 0.1,
        "{} vs {}",
        mean(&within),
        mean(&across)
    );
}

#[test]
fn cold_labels_follow_affinity() {
    let d = generate(&SynthConfig {
        label_temperature: 1e-3,
        ..small(8)
    })
    .unwrap();
    let mut batch = PredictionBatch::default();
    for u in &d.users {
        for (&t, &y) in u.targets.iter().zip(&u.labels) {
            batch.push(
                dot(&u.latent, d.item_latents.row(t as usize)),
                f64::from(y),
                u.id,
            );
        }
    }
    assert!(auc(&batch).unwrap() >= 0.99);
}

#[test]
fn single_group_without_noise_is_homogeneous() {
    let d = generate(&SynthConfig {
        num_groups: 1,
        noise_scale: 0.0,
        min_len: 200,
        max_len: 200,
        ..small(9)
    })
    .unwrap();
    assert!(d.users.windows(2).all(|w| w[0].latent == w[1].latent));
    let means = d.mean_embeddings();
    for m in &means[1..] {
        assert!(cosine(&means[0], m).unwrap() > 0.9);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        SynthConfig {
            num_users: 0,
            ..small(1)
        },
        SynthConfig {
            latent_rank: 64,
            ..small(1)
        },
        SynthConfig {
            min_len: 50,
            max_len: 10,
            ..small(1)
        },
        SynthConfig {
            label_temperature: 0.0,
            ..small(1)
        },
    ] {
        assert!(generate(&cfg).is_err());
    }
}

#[test]
fn save_load_round_trip() {
    let d = generate(&small(10)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    d.save(dir.path()).unwrap();
    assert_eq!(SynthDataset::load(dir.path()).unwrap(), d);
    std::fs::write(dir.path().join("data.bin"), b"nope").unwrap();
    assert!(SynthDataset::load(dir.path()).is_err());
}
