//! Publishes a long version chain through a writer that is killed at random
//! points, then checks every version reconstructs bit-exactly.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::*;
use crate::toylm::{decode_shard, encode_shard};

/// `count` shards of `floats` uniform values each.
pub fn random_shards(seed: u64, count: usize, floats: usize) -> Vec<Shard> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let v: Vec<f32> = (0..floats).map(|_| rng.gen_range(-1.0..1.0)).collect();
            encode_shard(&format!("s{i}"), &[floats], &v)
        })
        .collect()
}

/// Re-encodes each shard with a fraction `frac` of its values nudged.
pub fn perturb(shards: &[Shard], frac: f64, seed: u64) -> Vec<Shard> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shards
        .iter()
        .map(|s| {
            let (h, mut v) = decode_shard(&s.bytes).expect("shards produced by encode_shard");
            for x in v.iter_mut() {
                if rng.gen_bool(frac) {
                    *x += rng.gen_range(-1e-2..1e-2);
                }
            }
            encode_shard(&h.name, &h.shape, &v)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainDemoConfig {
    pub versions: u64,
    pub kills: usize,
    pub shards: usize,
    pub floats_per_shard: usize,
    /// Fraction of values changed between versions.
    pub change_frac: f64,
    pub snapshot_interval: u64,
    pub seed: u64,
}

impl Default for ChainDemoConfig {
    fn default() -> Self {
        ChainDemoConfig {
            versions: 100,
            kills: 10,
            shards: 4,
            floats_per_shard: 16_384,
            change_frac: 0.01,
            snapshot_interval: DEFAULT_SNAPSHOT_INTERVAL,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDemoReport {
    pub versions: u64,
    pub kills: usize,
    pub restarts: usize,
    pub full_versions: Vec<u64>,
    pub max_deltas_applied: usize,
    /// Versions whose reconstruction differed from what was published.
    pub mismatches: Vec<u64>,
    /// Manifest entries referencing objects that do not exist.
    pub dangling: usize,
    pub full_bytes: u64,
    pub mean_delta_bytes: f64,
    /// Delta size of an unchanged version relative to a full snapshot.
    pub identical_ratio: f64,
    /// Delta size of a `change_frac`-perturbed version relative to a full one.
    pub changed_ratio: f64,
}

impl ChainDemoReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty() && self.dangling == 0
    }
}

/// Delta/full size ratios for an identical and a perturbed successor.
pub fn delta_ratios(cfg: &ChainDemoConfig) -> Result<(f64, f64), SyncError> {
    let store = Arc::new(MemStore::new());
    let mut p = Publisher::open(store, cfg.snapshot_interval.max(3), Exec::default())?;
    let v1 = random_shards(cfg.seed, cfg.shards, cfg.floats_per_shard);
    let full = p.publish(1, &v1, false)?.object_bytes() as f64;
    let same = p.publish(2, &v1, false)?.object_bytes() as f64;
    let changed = p
        .publish(3, &perturb(&v1, cfg.change_frac, cfg.seed ^ 1), false)?
        .object_bytes() as f64;
    Ok((same / full, changed / full))
}

/// Runs the chain on `store`, killing the writer during `kills` distinct
/// publishes after a random number of object puts, and restarting it from
/// the store alone.
pub fn run_chain_demo(store: Arc<dyn BlobStore>, cfg: &ChainDemoConfig) -> Result<ChainDemoReport, SyncError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kills = cfg.kills.min(cfg.versions as usize);
    let mut kill_at: Vec<u64> = sample(&mut rng, cfg.versions as usize, kills)
        .into_iter()
        .map(|i| i as u64 + 1)
        .collect();
    kill_at.sort_unstable();
    let switch = Arc::new(KillSwitchStore::new(store.clone()));
    let open = |s: &Arc<KillSwitchStore>| Publisher::open(s.clone(), cfg.snapshot_interval, Exec::default());
    let mut publisher = open(&switch)?;
    let mut truth = vec![random_shards(cfg.seed, cfg.shards, cfg.floats_per_shard)];
    let mut restarts = 0;
    let mut v = 1u64;
    while v <= cfg.versions {
        let shards = truth[v as usize - 1].clone();
        let armed = kill_at.first() == Some(&v);
        if armed {
            kill_at.remove(0);
            // objects plus the manifest; killing after all of them is a no-op
            switch.arm(rng.gen_range(0..=cfg.shards));
        }
        let landed = match publisher.publish(v, &shards, false) {
            Ok(_) => true,
            Err(_) if armed => {
                switch.disarm();
                restarts += 1;
                publisher = open(&switch)?;
                read_manifest(store.as_ref())?.head() == Some(v)
            }
            Err(e) => return Err(e),
        };
        switch.disarm();
        if landed {
            v += 1;
            truth.push(perturb(&shards, cfg.change_frac, cfg.seed ^ v));
        }
    }
    truth.pop();

    let m = read_manifest(store.as_ref())?;
    let dangling = m
        .entries
        .iter()
        .flat_map(|e| &e.shards)
        .filter(|s| store.get(&s.key).is_err())
        .count();
    let mut mismatches = Vec::new();
    let mut max_deltas = 0;
    for (i, t) in truth.iter().enumerate() {
        let version = i as u64 + 1;
        match reconstruct_from(store.as_ref(), &m, version) {
            Ok((shards, d)) if &shards == t => max_deltas = max_deltas.max(d),
            _ => mismatches.push(version),
        }
    }
    let fulls: Vec<&ManifestEntry> = m.entries.iter().filter(|e| e.kind == ObjectKind::Full).collect();
    let deltas: Vec<&ManifestEntry> = m.entries.iter().filter(|e| e.kind == ObjectKind::Delta).collect();
    let (identical_ratio, changed_ratio) = delta_ratios(cfg)?;
    Ok(ChainDemoReport {
        versions: cfg.versions,
        kills,
        restarts,
        full_versions: fulls.iter().map(|e| e.version).collect(),
        max_deltas_applied: max_deltas,
        mismatches,
        dangling,
        full_bytes: fulls.first().map_or(0, |e| e.object_bytes()),
        mean_delta_bytes: if deltas.is_empty() {
            0.0
        } else {
            deltas.iter().map(|e| e.object_bytes() as f64).sum::<f64>() / deltas.len() as f64
        },
        identical_ratio,
        changed_ratio,
    })
}
