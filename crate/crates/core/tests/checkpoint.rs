use collectivekv::attention::{AttentionMode, CtrModel, ModelConfig, SequenceBatch};
use collectivekv::checkpoint::{decode, encode, load, save};
use collectivekv::collective::CollectiveConfig;
use collectivekv::numkit::Rng;
use collectivekv::Error;

fn model(seed: u64, tie: bool, mode: AttentionMode) -> CtrModel {
    let mut cc = CollectiveConfig::new(6, 2, 4, 10);
    cc.tie_routers = tie;
    CtrModel::init(ModelConfig::new(cc, mode), &mut Rng::new(seed)).unwrap()
}

fn batches(seed: u64) -> Vec<SequenceBatch> {
    let mut rng = Rng::new(seed);
    (0..4)
        .map(|u| SequenceBatch {
            user_id: u,
            history: rng.normal_matrix(5 + u as usize, 6, 1.0),
            targets: rng.normal_matrix(3, 6, 1.0),
            labels: vec![1.0, 0.0, 1.0],
        })
        .collect()
}

#[test]
fn same_seed_encodes_identically() {
    let a = model(1, false, AttentionMode::Target);
    let b = model(1, false, AttentionMode::Target);
    assert_eq!(encode(&a), encode(&b));
    assert_ne!(encode(&a), encode(&model(2, false, AttentionMode::Target)));
}

#[test]
fn round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let data = batches(3);
    for (i, (tie, mode)) in [
        (false, AttentionMode::Target),
        (true, AttentionMode::Target),
        (false, AttentionMode::SelfCausal),
    ]
    .into_iter()
    .enumerate()
    {
        let m = model(4 + i as u64, tie, mode);
        let path = dir.path().join(format!("m{i}.ckv"));
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config.attention.mode, mode);
        assert_eq!(back.config.collective.tie_routers, tie);
        assert_eq!(back.predict(&data).unwrap(), m.predict(&data).unwrap());
    }
}

#[test]
fn baseline_round_trips() {
    let cc = CollectiveConfig::baseline(6, 6);
    let m = CtrModel::init(
        ModelConfig::new(cc, AttentionMode::Target),
        &mut Rng::new(5),
    )
    .unwrap();
    assert_eq!(decode(&encode(&m)).unwrap().params, m.params);
}

#[test]
fn damaged_bytes_are_format_errors() {
    let bytes = encode(&model(6, false, AttentionMode::Target));
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    assert!(matches!(decode(&bad), Err(Error::Format { .. })));
    assert!(matches!(
        decode(&bytes[..bytes.len() - 3]),
        Err(Error::Format { .. })
    ));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode(&extra), Err(Error::Format { .. })));
    let mut flags = bytes;
    flags[20] = 0xff;
    assert!(matches!(decode(&flags), Err(Error::Format { .. })));
    assert!(matches!(
        load(std::path::Path::new("/nonexistent/x.ckv")),
        Err(Error::Io { .. })
    ));
}
