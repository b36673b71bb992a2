use super::*;
use crate::envsim::TaskState;
use crate::toylm::{encode_shard, recompute_logprobs, sample, SampleConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_shards(seed: u64, count: usize, floats: usize) -> Vec<Shard> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let v: Vec<f32> = (0..floats).map(|_| rng.gen_range(-1.0..1.0)).collect();
            encode_shard(&format!("s{i}"), &[floats], &v)
        })
        .collect()
}

/// Re-encodes each shard with a fraction of its values nudged.
fn perturb(shards: &[Shard], frac: f64, seed: u64) -> Vec<Shard> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shards
        .iter()
        .map(|s| {
            let (h, mut v) = crate::toylm::decode_shard(&s.bytes).unwrap();
            for x in v.iter_mut() {
                if rng.gen_bool(frac) {
                    *x += rng.gen_range(-1e-2..1e-2);
                }
            }
            encode_shard(&h.name, &h.shape, &v)
        })
        .collect()
}

fn mem() -> Arc<MemStore> {
    Arc::new(MemStore::new())
}

fn publisher(store: Arc<dyn BlobStore>) -> Publisher {
    Publisher::open(store, DEFAULT_SNAPSHOT_INTERVAL, Exec::default()).unwrap()
}

#[test]
fn rle_examples() {
    assert_eq!(xor_rle_encode(&[], &[]), Vec::<u8>::new());
    // three equal bytes, then one differing byte
    assert_eq!(xor_rle_encode(&[1, 2, 3, 4], &[1, 2, 3, 5]), vec![3, 1, 1]);
    assert_eq!(xor_rle_encode(&[7; 4], &[7; 4]), vec![4, 0]);
    // a run longer than 127 takes a two-byte length
    assert_eq!(xor_rle_encode(&[0; 200], &[0; 200]), vec![0xc8, 0x01, 0]);
    assert_eq!(xor_rle_decode(&[1, 2, 3, 4], &[3, 1, 1], 4).unwrap(), vec![1, 2, 3, 5]);
    assert!(xor_rle_decode(&[], &[3, 0], 2).is_err());
    assert!(xor_rle_decode(&[], &[1, 5, 1], 9).is_err());
}

proptest! {
    #[test]
    fn rle_round_trip(parent in prop::collection::vec(any::<u8>(), 0..300), new in prop::collection::vec(any::<u8>(), 0..300)) {
        let enc = xor_rle_encode(&parent, &new);
        prop_assert_eq!(xor_rle_decode(&parent, &enc, new.len()).unwrap(), new.clone());
        let d = DeltaObject::diff("x", &parent, &new);
        let back = DeltaObject::decode("k", &d.encode()).unwrap();
        prop_assert_eq!(back.apply(&parent).unwrap(), new);
    }
}

#[test]
fn first_version_is_full_and_versions_are_sequential() {
    let store = mem();
    let mut p = publisher(store.clone());
    let shards = random_shards(1, 2, 100);
    let e = p.publish(1, &shards, false).unwrap();
    assert_eq!((e.kind, e.parent), (ObjectKind::Full, None));
    assert_eq!(e.shards[0].key, "weights/v1/s0.full");
    assert_eq!(
        p.publish(3, &shards, false),
        Err(SyncError::VersionConflict { expected: 2, got: 3 })
    );
    let e = p.publish(2, &shards, false).unwrap();
    assert_eq!((e.kind, e.parent), (ObjectKind::Delta, Some(1)));
    assert_eq!(e.shards[1].key, "weights/v2/s1.delta");
    assert_eq!(p.publish(3, &shards, true).unwrap().kind, ObjectKind::Full);
    assert_eq!(reconstruct(store.as_ref(), 3).unwrap(), shards);
    assert_eq!(reconstruct(store.as_ref(), 9), Err(SyncError::UnknownVersion(9)));
}

#[test]
fn delta_sizes() {
    let store = mem();
    let mut p = publisher(store.clone());
    let v1 = random_shards(2, 4, 16_384);
    let full = p.publish(1, &v1, false).unwrap();
    let same = p.publish(2, &v1, false).unwrap();
    assert!(
        (same.object_bytes() as f64) < 0.01 * full.object_bytes() as f64,
        "{} vs {}",
        same.object_bytes(),
        full.object_bytes()
    );
    let v3 = perturb(&v1, 0.01, 3);
    let sparse = p.publish(3, &v3, false).unwrap();
    assert!((sparse.object_bytes() as f64) <= 0.10 * full.object_bytes() as f64);
    assert_eq!(reconstruct(store.as_ref(), 3).unwrap(), v3);
}

#[test]
fn long_chain_reconstructs_exactly_with_bounded_chains() {
    let store = mem();
    let mut p = publisher(store.clone());
    let mut truth = vec![random_shards(4, 3, 256)];
    p.publish(1, &truth[0], false).unwrap();
    for v in 2..=100u64 {
        let next = perturb(truth.last().unwrap(), 0.05, v);
        p.publish(v, &next, false).unwrap();
        truth.push(next);
    }
    let m = read_manifest(store.as_ref()).unwrap();
    let fulls: Vec<u64> = m
        .entries
        .iter()
        .filter(|e| e.kind == ObjectKind::Full)
        .map(|e| e.version)
        .collect();
    assert_eq!(fulls, vec![1, 26, 51, 76]);
    for v in 1..=100u64 {
        let (shards, deltas) = reconstruct_from(store.as_ref(), &m, v).unwrap();
        assert!(deltas <= 24);
        assert_eq!(shards, truth[v as usize - 1]);
    }
}

#[test]
fn tampered_delta_is_rejected_without_partial_result() {
    let store = mem();
    let mut p = publisher(store.clone());
    let v1 = random_shards(5, 2, 64);
    p.publish(1, &v1, false).unwrap();
    p.publish(2, &perturb(&v1, 0.5, 1), false).unwrap();
    let key = object_key(2, "s1", ObjectKind::Delta);
    let mut bytes = store.get(&key).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    store.put(&key, &bytes).unwrap();
    match reconstruct(store.as_ref(), 2) {
        Err(SyncError::Digest(k)) | Err(SyncError::Corrupt { key: k, .. }) => assert_eq!(k, key),
        other => panic!("expected an integrity error, got {other:?}"),
    }
    // the untouched version still loads
    assert_eq!(reconstruct(store.as_ref(), 1).unwrap(), v1);

    let key = object_key(1, "s0", ObjectKind::Full);
    store.put(&key, b"garbage").unwrap();
    assert_eq!(reconstruct(store.as_ref(), 1), Err(SyncError::Digest(key)));
}

#[test]
fn missing_object_is_reported() {
    let store = mem();
    let mut p = publisher(store.clone());
    p.publish(1, &random_shards(6, 1, 8), false).unwrap();
    let mut m = read_manifest(store.as_ref()).unwrap();
    m.entries[0].shards[0].key = "weights/v1/nope.full".into();
    write_manifest(store.as_ref(), &m).unwrap();
    assert_eq!(
        reconstruct(store.as_ref(), 1),
        Err(SyncError::NotFound("weights/v1/nope.full".into()))
    );
}

#[test]
fn manifest_validation() {
    let mut m = WeightManifest::new(25);
    let shard = ShardEntry {
        name: "a".into(),
        key: "k".into(),
        digest: String::new(),
        size: 0,
        object_size: 0,
    };
    m.entries.push(ManifestEntry {
        version: 2,
        parent: Some(1),
        kind: ObjectKind::Delta,
        shards: vec![shard.clone()],
    });
    assert!(m.validate().is_err());
    m.entries.insert(
        0,
        ManifestEntry {
            version: 1,
            parent: None,
            kind: ObjectKind::Full,
            shards: vec![shard],
        },
    );
    m.validate().unwrap();
    m.entries.swap(0, 1);
    assert!(m.validate().is_err());
}

#[test]
fn local_dir_store_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let store: Arc<dyn BlobStore> = Arc::new(LocalDirStore::new(dir.path().join("s")).unwrap());
    store.put("weights/v1/a.full", b"abc").unwrap();
    store.put("weights/v1/a.full", b"abcd").unwrap();
    store.put("other/x", b"").unwrap();
    assert_eq!(store.get("weights/v1/a.full").unwrap(), b"abcd");
    assert_eq!(store.list("weights/").unwrap(), vec!["weights/v1/a.full"]);
    assert_eq!(store.list("").unwrap().len(), 2);
    assert!(matches!(store.get("missing"), Err(SyncError::NotFound(_))));
    assert!(store.put("../escape", b"x").is_err());
    assert!(store.put("/abs", b"x").is_err());

    let mut p = publisher(store.clone());
    let shards = random_shards(7, 2, 32);
    p.publish(1, &shards, false).unwrap();
    p.publish(2, &perturb(&shards, 0.2, 2), false).unwrap();
    assert_eq!(reconstruct(store.as_ref(), 1).unwrap(), shards);
}

#[test]
fn mem_store_list_is_prefix_scoped() {
    let s = MemStore::new();
    for k in ["a/1", "a/2", "ab", "b"] {
        s.put(k, b"x").unwrap();
    }
    assert_eq!(s.list("a/").unwrap(), vec!["a/1", "a/2"]);
    assert_eq!(s.list("a").unwrap().len(), 3);
    assert_eq!(s.total_bytes(), 4);
}

/// Publishes `versions` versions through a store that is killed after
/// `kills[i]` puts on attempt `i`; the writer restarts from the store alone.
fn publish_with_kills(kills: &[usize], versions: u64, seed: u64) -> (Arc<MemStore>, Vec<Vec<Shard>>) {
    let mem = mem();
    let switch = Arc::new(KillSwitchStore::new(mem.clone()));
    let mut truth = vec![random_shards(seed, 3, 64)];
    let mut kills = kills.iter();
    let mut p = Publisher::open(switch.clone(), 5, Exec::Sequential).unwrap();
    let mut v = 1;
    while v <= versions {
        let shards = truth[v as usize - 1].clone();
        if let Some(&k) = kills.next() {
            switch.arm(k);
        }
        match p.publish(v, &shards, false) {
            Ok(_) => {
                switch.disarm();
                v += 1;
                truth.push(perturb(&shards, 0.1, seed ^ v));
            }
            Err(_) => {
                // the manifest must only reference objects that exist
                switch.disarm();
                let m = read_manifest(mem.as_ref()).unwrap();
                for e in &m.entries {
                    for s in &e.shards {
                        assert!(mem.get(&s.key).is_ok(), "dangling {}", s.key);
                    }
                }
                p = Publisher::open(switch.clone(), 5, Exec::Sequential).unwrap();
                // a kill after the manifest put means the version landed
                if m.head() == Some(v) {
                    v += 1;
                    truth.push(perturb(&shards, 0.1, seed ^ v));
                }
            }
        }
    }
    truth.pop();
    (mem, truth)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn kills_never_break_reconstruction(kills in prop::collection::vec(0usize..5, 0..20), seed in any::<u64>()) {
        let (store, truth) = publish_with_kills(&kills, 12, seed);
        let m = read_manifest(store.as_ref()).unwrap();
        prop_assert_eq!(m.head(), Some(12));
        for (i, t) in truth.iter().enumerate() {
            prop_assert_eq!(&reconstruct(store.as_ref(), i as u64 + 1).unwrap(), t);
        }
    }
}

#[test]
fn readers_see_manifest_prefixes() {
    let store = mem();
    let shards = random_shards(8, 2, 64);
    let writer = {
        let store = store.clone();
        std::thread::spawn(move || {
            let mut p = publisher(store);
            let mut s = shards;
            for v in 1..=40 {
                p.publish(v, &s, false).unwrap();
                s = perturb(&s, 0.1, v);
            }
        })
    };
    let mut last = 0;
    while !writer.is_finished() {
        let m = read_manifest(store.as_ref()).unwrap();
        let versions: Vec<u64> = m.entries.iter().map(|e| e.version).collect();
        assert_eq!(versions, (1..=versions.len() as u64).collect::<Vec<_>>());
        assert!(versions.len() as u64 >= last);
        last = versions.len() as u64;
        if let Some(h) = m.head() {
            reconstruct_from(store.as_ref(), &m, h).unwrap();
        }
    }
    writer.join().unwrap();
}

fn model_config() -> ModelConfig {
    ModelConfig::default()
}

fn params(seed: u64) -> ToyMoEParams<f32> {
    ToyMoEParams::init(model_config(), seed).unwrap()
}

#[test]
fn hotload_noop_skip_and_failure() {
    let store = mem();
    let mut p = publisher(store.clone());
    let versions: Vec<ToyMoEParams<f32>> = (0..5).map(params).collect();
    p.publish(1, &versions[1].to_shards(), false).unwrap();
    let mut engine = HotloadEngine::from_store(store.clone(), model_config()).unwrap();
    assert_eq!(engine.version(), 1);
    assert_eq!(engine.poll_and_hotload(), 1);

    for v in 2..=4 {
        p.publish(v, &versions[v as usize].to_shards(), false).unwrap();
    }
    assert_eq!(engine.poll_and_hotload(), 4);
    assert_eq!(*engine.params(), versions[4]);
    assert!(engine.warning().is_none());

    p.publish(5, &versions[0].to_shards(), false).unwrap();
    let key = &read_manifest(store.as_ref()).unwrap().entries[4].shards[0].key.clone();
    store.put(key, b"broken").unwrap();
    assert_eq!(engine.poll_and_hotload(), 4);
    assert!(engine.warning().is_some());
    assert_eq!(*engine.params(), versions[4]);
}

/// Publishes a new version after a fixed number of sampler polls.
struct PublishingFeed {
    engine: HotloadEngine,
    publisher: Publisher,
    next: Option<(usize, ToyMoEParams<f32>)>,
    polls: usize,
}

impl VersionFeed for PublishingFeed {
    fn current(&mut self) -> (u64, Arc<ToyMoEParams<f32>>) {
        if let Some((at, _)) = &self.next {
            if *at == self.polls {
                let (_, p) = self.next.take().unwrap();
                self.publisher.publish(2, &p.to_shards(), false).unwrap();
            }
        }
        self.polls += 1;
        self.engine.current()
    }
}

#[test]
fn mid_rollout_adoption_tags_later_tokens() {
    let store = mem();
    let mut publisher = publisher(store.clone());
    let (a, b) = (params(10), params(11));
    publisher.publish(1, &a.to_shards(), false).unwrap();
    let engine = HotloadEngine::from_store(store.clone(), model_config()).unwrap();
    let mut feed = PublishingFeed {
        engine,
        publisher,
        next: Some((3, b.clone())),
        polls: 0,
    };
    let mut task = TaskState::new(vec![20, 21, 22, 23, 24, 25]);
    let cfg = SampleConfig {
        max_tokens: 40,
        ..Default::default()
    };
    let r = sample(&mut feed, task.prompt(), &mut task, cfg, 3).unwrap();
    let versions: Vec<u64> = r
        .records()
        .filter(|x| x.is_trainable())
        .map(|x| x.policy_version)
        .collect();
    assert_eq!(&versions[..3], &[1, 1, 1]);
    assert!(versions[3..].iter().all(|&v| v == 2));
    let by_version = [a, b];
    for seg in &r.segments {
        for (i, rec) in seg.records.iter().enumerate() {
            let lp = recompute_logprobs(
                &by_version[rec.policy_version as usize - 1],
                seg,
                &cfg.grammar,
                cfg.temperature,
            )
            .unwrap();
            if let Some(v) = lp[i] {
                assert!((v - rec.sampling_logprob).abs() < 1e-6);
            }
        }
    }
}
