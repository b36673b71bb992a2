//! Versioned weight publication over a blob store: full snapshots and
//! XOR + zero-run-length deltas, bit-exact chain reconstruction, and a
//! manifest-polling hotload engine that feeds the sampler.
//!
//! Readers only ever talk to the store. Objects are written before the
//! manifest that references them, and the manifest is replaced with a single
//! atomic `put`, so a writer killed at any point leaves a manifest that only
//! references complete objects.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Exec};
use crate::toylm::{sha256_hex, ModelConfig, Shard, ToyMoEParams, VersionFeed};

pub const MANIFEST_KEY: &str = "weights/manifest.json";
pub const DEFAULT_SNAPSHOT_INTERVAL: u64 = 25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("object not found: {0}")]
    NotFound(String),
    #[error("store i/o: {0}")]
    Io(String),
    #[error("version conflict: expected {expected}, got {got}")]
    VersionConflict { expected: u64, got: u64 },
    #[error("version {0} is not in the manifest")]
    UnknownVersion(u64),
    #[error("digest mismatch for {0}")]
    Digest(String),
    #[error("corrupt object {key}: {reason}")]
    Corrupt { key: String, reason: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("weights: {0}")]
    Weights(String),
}

/// The only interface between writers and readers.
pub trait BlobStore: Send + Sync {
    fn get(&self, key: &str) -> Result<Vec<u8>, SyncError>;
    /// Atomic: readers see either the old or the new object, never a mix.
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), SyncError>;
    /// Keys starting with `prefix`, sorted.
    fn list(&self, prefix: &str) -> Result<Vec<String>, SyncError>;
}

#[derive(Debug, Default)]
pub struct MemStore {
    objects: Mutex<BTreeMap<String, Vec<u8>>>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total_bytes(&self) -> usize {
        self.objects.lock().unwrap().values().map(Vec::len).sum()
    }
}

impl BlobStore for MemStore {
    fn get(&self, key: &str) -> Result<Vec<u8>, SyncError> {
        self.objects
            .lock()
            .unwrap()
            .get(key)
            .cloned()
            .ok_or_else(|| SyncError::NotFound(key.to_string()))
    }

    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), SyncError> {
        self.objects.lock().unwrap().insert(key.to_string(), bytes.to_vec());
        Ok(())
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, SyncError> {
        Ok(self
            .objects
            .lock()
            .unwrap()
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect())
    }
}

/// Objects as files under a root directory; puts write a temp file in the
/// target directory and rename it into place.
#[derive(Debug, Clone)]
pub struct LocalDirStore {
    root: PathBuf,
}

impl LocalDirStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, SyncError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(io)?;
        Ok(LocalDirStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, key: &str) -> Result<PathBuf, SyncError> {
        let rel = Path::new(key);
        if key.is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(SyncError::Io(format!("invalid key {key:?}")));
        }
        Ok(self.root.join(rel))
    }
}

fn io(e: impl std::fmt::Display) -> SyncError {
    SyncError::Io(e.to_string())
}

impl BlobStore for LocalDirStore {
    fn get(&self, key: &str) -> Result<Vec<u8>, SyncError> {
        let mut f = match std::fs::File::open(self.path(key)?) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(SyncError::NotFound(key.to_string())),
            Err(e) => return Err(io(e)),
        };
        let mut out = Vec::new();
        f.read_to_end(&mut out).map_err(io)?;
        Ok(out)
    }

    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), SyncError> {
        let path = self.path(key)?;
        let dir = path.parent().expect("keys are relative to the root");
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(bytes).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(&path).map_err(io)?;
        Ok(())
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, SyncError> {
        let mut keys = Vec::new();
        for entry in walkdir::WalkDir::new(&self.root) {
            let entry = entry.map_err(io)?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(&self.root).map_err(io)?;
            let key = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            // leftover temp files from a killed writer are not objects
            if key.starts_with(prefix) && !rel.file_name().is_some_and(|n| n.to_string_lossy().starts_with(".tmp")) {
                keys.push(key);
            }
        }
        keys.sort();
        Ok(keys)
    }
}

/// Wraps a store and fails every operation once a fixed number of puts has
/// gone through, simulating a writer process killed mid-publish.
pub struct KillSwitchStore {
    inner: Arc<dyn BlobStore>,
    puts_left: Mutex<Option<usize>>,
}

impl KillSwitchStore {
    pub fn new(inner: Arc<dyn BlobStore>) -> Self {
        KillSwitchStore {
            inner,
            puts_left: Mutex::new(None),
        }
    }

    /// Allow `n` more puts, then die.
    pub fn arm(&self, n: usize) {
        *self.puts_left.lock().unwrap() = Some(n);
    }

    pub fn disarm(&self) {
        *self.puts_left.lock().unwrap() = None;
    }

    pub fn is_dead(&self) -> bool {
        *self.puts_left.lock().unwrap() == Some(0)
    }
}

impl BlobStore for KillSwitchStore {
    fn get(&self, key: &str) -> Result<Vec<u8>, SyncError> {
        if self.is_dead() {
            return Err(SyncError::Io("writer killed".into()));
        }
        self.inner.get(key)
    }

    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), SyncError> {
        let mut left = self.puts_left.lock().unwrap();
        match *left {
            Some(0) => return Err(SyncError::Io("writer killed".into())),
            Some(n) => *left = Some(n - 1),
            None => {}
        }
        self.inner.put(key, bytes)
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, SyncError> {
        if self.is_dead() {
            return Err(SyncError::Io("writer killed".into()));
        }
        self.inner.list(prefix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Full,
    Delta,
}

impl ObjectKind {
    fn suffix(self) -> &'static str {
        match self {
            ObjectKind::Full => "full",
            ObjectKind::Delta => "delta",
        }
    }
}

pub fn object_key(version: u64, shard: &str, kind: ObjectKind) -> String {
    format!("weights/v{version}/{shard}.{}", kind.suffix())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardEntry {
    pub name: String,
    pub key: String,
    /// SHA-256 of the reconstructed shard bytes.
    pub digest: String,
    pub size: u64,
    /// Bytes actually stored for this version.
    pub object_size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub version: u64,
    pub parent: Option<u64>,
    pub kind: ObjectKind,
    pub shards: Vec<ShardEntry>,
}

impl ManifestEntry {
    pub fn object_bytes(&self) -> u64 {
        self.shards.iter().map(|s| s.object_size).sum()
    }

    pub fn shard_bytes(&self) -> u64 {
        self.shards.iter().map(|s| s.size).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightManifest {
    pub snapshot_interval: u64,
    pub entries: Vec<ManifestEntry>,
}

impl WeightManifest {
    pub fn new(snapshot_interval: u64) -> Self {
        WeightManifest {
            snapshot_interval,
            entries: Vec::new(),
        }
    }

    pub fn head(&self) -> Option<u64> {
        self.entries.last().map(|e| e.version)
    }

    pub fn entry(&self, version: u64) -> Option<&ManifestEntry> {
        self.entries
            .binary_search_by_key(&version, |e| e.version)
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Entries from the nearest full snapshot up to `version`, oldest first.
    pub fn chain(&self, version: u64) -> Result<Vec<&ManifestEntry>, SyncError> {
        let mut out = Vec::new();
        let mut v = version;
        loop {
            let e = self.entry(v).ok_or(SyncError::UnknownVersion(v))?;
            out.push(e);
            match (e.kind, e.parent) {
                (ObjectKind::Full, _) => break,
                (ObjectKind::Delta, Some(p)) if p < v => v = p,
                _ => return Err(SyncError::Manifest(format!("delta v{v} has no earlier parent"))),
            }
        }
        out.reverse();
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), SyncError> {
        if self.snapshot_interval == 0 {
            return Err(SyncError::Manifest("snapshot interval must be ≥ 1".into()));
        }
        if self.entries.windows(2).any(|w| w[0].version >= w[1].version) {
            return Err(SyncError::Manifest("versions are not strictly increasing".into()));
        }
        for e in &self.entries {
            self.chain(e.version)?;
        }
        Ok(())
    }
}

/// Reads the manifest; a store without one has no versions yet.
pub fn read_manifest(store: &dyn BlobStore) -> Result<WeightManifest, SyncError> {
    match store.get(MANIFEST_KEY) {
        Ok(bytes) => {
            let m: WeightManifest = serde_json::from_slice(&bytes).map_err(|e| SyncError::Manifest(e.to_string()))?;
            m.validate()?;
            Ok(m)
        }
        Err(SyncError::NotFound(_)) => Ok(WeightManifest::new(DEFAULT_SNAPSHOT_INTERVAL)),
        Err(e) => Err(e),
    }
}

fn write_manifest(store: &dyn BlobStore, m: &WeightManifest) -> Result<(), SyncError> {
    let bytes = serde_json::to_vec_pretty(m).expect("manifest serializes");
    store.put(MANIFEST_KEY, &bytes)
}

/// XOR of `new` against `parent` (zero-extended), as alternating
/// LEB128-prefixed zero runs and literal runs.
pub fn xor_rle_encode(parent: &[u8], new: &[u8]) -> Vec<u8> {
    let x = |i: usize| new[i] ^ parent.get(i).copied().unwrap_or(0);
    let mut out = Vec::new();
    let mut i = 0;
    while i < new.len() {
        let start = i;
        while i < new.len() && x(i) == 0 {
            i += 1;
        }
        let zeros = i - start;
        let lit_start = i;
        while i < new.len() && x(i) != 0 {
            i += 1;
        }
        leb128::write::unsigned(&mut out, zeros as u64).expect("vec write");
        leb128::write::unsigned(&mut out, (i - lit_start) as u64).expect("vec write");
        out.extend((lit_start..i).map(x));
    }
    out
}

pub fn xor_rle_decode(parent: &[u8], payload: &[u8], len: usize) -> Result<Vec<u8>, String> {
    let mut r = payload;
    let mut xor = Vec::with_capacity(len);
    while !r.is_empty() {
        let zeros = leb128::read::unsigned(&mut r).map_err(|e| e.to_string())? as usize;
        let lit = leb128::read::unsigned(&mut r).map_err(|e| e.to_string())? as usize;
        if xor.len() + zeros + lit > len || lit > r.len() {
            return Err("run overflows the recorded length".into());
        }
        xor.resize(xor.len() + zeros, 0);
        xor.extend_from_slice(&r[..lit]);
        r = &r[lit..];
    }
    if xor.len() != len {
        return Err(format!("decoded {} bytes, expected {len}", xor.len()));
    }
    for (i, b) in xor.iter_mut().enumerate() {
        *b ^= parent.get(i).copied().unwrap_or(0);
    }
    Ok(xor)
}

/// One shard's difference against its parent version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaObject {
    pub shard: String,
    pub uncompressed_len: u64,
    /// SHA-256 of the reconstructed shard.
    pub digest: String,
    #[serde(skip)]
    pub payload: Vec<u8>,
}

impl DeltaObject {
    pub fn diff(shard: &str, parent: &[u8], new: &[u8]) -> Self {
        DeltaObject {
            shard: shard.to_string(),
            uncompressed_len: new.len() as u64,
            digest: sha256_hex(new),
            payload: xor_rle_encode(parent, new),
        }
    }

    /// Reconstructs the shard, verifying the recorded digest.
    pub fn apply(&self, parent: &[u8]) -> Result<Vec<u8>, SyncError> {
        let corrupt = |reason: String| SyncError::Corrupt {
            key: self.shard.clone(),
            reason,
        };
        let out = xor_rle_decode(parent, &self.payload, self.uncompressed_len as usize).map_err(corrupt)?;
        if sha256_hex(&out) != self.digest {
            return Err(SyncError::Digest(self.shard.clone()));
        }
        Ok(out)
    }

    /// `u32` LE header length, JSON header, RLE payload.
    pub fn encode(&self) -> Vec<u8> {
        let h = serde_json::to_vec(self).expect("header serializes");
        let mut out = Vec::with_capacity(4 + h.len() + self.payload.len());
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(key: &str, bytes: &[u8]) -> Result<Self, SyncError> {
        let corrupt = |reason: &str| SyncError::Corrupt {
            key: key.to_string(),
            reason: reason.to_string(),
        };
        let hlen = bytes
            .get(..4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| corrupt("truncated"))?;
        let h = bytes.get(4..4 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let mut d: DeltaObject = serde_json::from_slice(h).map_err(|e| corrupt(&e.to_string()))?;
        d.payload = bytes[4 + hlen..].to_vec();
        Ok(d)
    }
}

/// Reconstructs every shard of `version`, verifying each intermediate digest.
/// Nothing is returned unless the whole chain checks out.
pub fn reconstruct(store: &dyn BlobStore, version: u64) -> Result<Vec<Shard>, SyncError> {
    let manifest = read_manifest(store)?;
    reconstruct_from(store, &manifest, version).map(|(shards, _)| shards)
}

/// Like [`reconstruct`], also returning the number of deltas applied per shard.
pub fn reconstruct_from(
    store: &dyn BlobStore,
    manifest: &WeightManifest,
    version: u64,
) -> Result<(Vec<Shard>, usize), SyncError> {
    let chain = manifest.chain(version)?;
    let mut current: Vec<Shard> = Vec::new();
    for e in &chain {
        let mut next = Vec::with_capacity(e.shards.len());
        for s in &e.shards {
            let bytes = store.get(&s.key)?;
            let data = match e.kind {
                ObjectKind::Full => bytes,
                ObjectKind::Delta => {
                    let parent = current.iter().find(|p| p.name == s.name).ok_or_else(|| {
                        SyncError::Manifest(format!("v{} delta for unknown shard {}", e.version, s.name))
                    })?;
                    let d = DeltaObject::decode(&s.key, &bytes)?;
                    if d.digest != s.digest {
                        return Err(SyncError::Digest(s.key.clone()));
                    }
                    d.apply(&parent.bytes).map_err(|err| match err {
                        SyncError::Corrupt { reason, .. } => SyncError::Corrupt {
                            key: s.key.clone(),
                            reason,
                        },
                        _ => SyncError::Digest(s.key.clone()),
                    })?
                }
            };
            if data.len() as u64 != s.size || sha256_hex(&data) != s.digest {
                return Err(SyncError::Digest(s.key.clone()));
            }
            next.push(Shard {
                name: s.name.clone(),
                bytes: data,
            });
        }
        current = next;
    }
    Ok((current, chain.len() - 1))
}

/// The single writer. Caches the last published shards so each publish only
/// diffs against memory.
pub struct Publisher {
    store: Arc<dyn BlobStore>,
    snapshot_interval: u64,
    exec: Exec,
    cache: Option<(u64, Vec<Shard>)>,
}

impl Publisher {
    /// Opens a store, resuming after whatever the manifest already holds.
    pub fn open(store: Arc<dyn BlobStore>, snapshot_interval: u64, exec: Exec) -> Result<Self, SyncError> {
        if snapshot_interval == 0 {
            return Err(SyncError::Manifest("snapshot interval must be ≥ 1".into()));
        }
        let manifest = read_manifest(store.as_ref())?;
        let cache = match manifest.head() {
            Some(v) => Some((v, reconstruct_from(store.as_ref(), &manifest, v)?.0)),
            None => None,
        };
        let snapshot_interval = if manifest.entries.is_empty() {
            snapshot_interval
        } else {
            manifest.snapshot_interval
        };
        Ok(Publisher {
            store,
            snapshot_interval,
            exec,
            cache,
        })
    }

    pub fn head(&self) -> Option<u64> {
        self.cache.as_ref().map(|(v, _)| *v)
    }

    pub fn publish(&mut self, version: u64, shards: &[Shard], force_full: bool) -> Result<ManifestEntry, SyncError> {
        let mut manifest = read_manifest(self.store.as_ref())?;
        let expected = manifest.head().map_or(1, |h| h + 1);
        if version != expected {
            return Err(SyncError::VersionConflict { expected, got: version });
        }
        if self.cache.as_ref().map(|(v, _)| *v) != manifest.head() {
            self.cache = match manifest.head() {
                Some(v) => Some((v, reconstruct_from(self.store.as_ref(), &manifest, v)?.0)),
                None => None,
            };
        }
        manifest.snapshot_interval = self.snapshot_interval;
        let parent = match &self.cache {
            Some((v, prev))
                if !force_full
                    && !(version - 1).is_multiple_of(self.snapshot_interval)
                    && prev.len() == shards.len()
                    && prev.iter().zip(shards).all(|(a, b)| a.name == b.name) =>
            {
                Some((*v, prev))
            }
            _ => None,
        };
        let kind = if parent.is_some() {
            ObjectKind::Delta
        } else {
            ObjectKind::Full
        };
        let objects = exec::map_range(self.exec, shards.len(), |i| {
            let s = &shards[i];
            let bytes = match parent {
                Some((_, prev)) => DeltaObject::diff(&s.name, &prev[i].bytes, &s.bytes).encode(),
                None => s.bytes.clone(),
            };
            let entry = ShardEntry {
                name: s.name.clone(),
                key: object_key(version, &s.name, kind),
                digest: sha256_hex(&s.bytes),
                size: s.bytes.len() as u64,
                object_size: bytes.len() as u64,
            };
            (entry, bytes)
        });
        for (entry, bytes) in &objects {
            self.store.put(&entry.key, bytes)?;
        }
        let entry = ManifestEntry {
            version,
            parent: parent.map(|(v, _)| v),
            kind,
            shards: objects.into_iter().map(|(e, _)| e).collect(),
        };
        manifest.entries.push(entry.clone());
        write_manifest(self.store.as_ref(), &manifest)?;
        self.cache = Some((version, shards.to_vec()));
        Ok(entry)
    }
}

/// Inference-side weight holder. Serves the sampler through [`VersionFeed`]
/// and swaps to the manifest head between token emissions; a swap replaces
/// one `Arc`, so a token never sees a mix of versions.
pub struct HotloadEngine {
    store: Arc<dyn BlobStore>,
    config: ModelConfig,
    version: u64,
    params: Arc<ToyMoEParams<f32>>,
    warning: Option<String>,
    poll_interval: usize,
    calls: usize,
}

impl HotloadEngine {
    pub fn new(store: Arc<dyn BlobStore>, config: ModelConfig, version: u64, params: Arc<ToyMoEParams<f32>>) -> Self {
        HotloadEngine {
            store,
            config,
            version,
            params,
            warning: None,
            poll_interval: 1,
            calls: 0,
        }
    }

    /// Starts at the current manifest head.
    pub fn from_store(store: Arc<dyn BlobStore>, config: ModelConfig) -> Result<Self, SyncError> {
        let manifest = read_manifest(store.as_ref())?;
        let head = manifest.head().ok_or(SyncError::UnknownVersion(0))?;
        let (shards, _) = reconstruct_from(store.as_ref(), &manifest, head)?;
        let params = ToyMoEParams::from_shards(config, &shards).map_err(|e| SyncError::Weights(e.to_string()))?;
        Ok(Self::new(store, config, head, Arc::new(params)))
    }

    /// Poll the store on every `n`-th feed request (default every request).
    pub fn with_poll_interval(mut self, n: usize) -> Self {
        self.poll_interval = n.max(1);
        self
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn params(&self) -> Arc<ToyMoEParams<f32>> {
        self.params.clone()
    }

    /// Set while the newest published version could not be loaded.
    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }

    /// Adopts the manifest head if it is newer, skipping intermediate
    /// versions. On failure keeps the current weights and records a warning.
    pub fn poll_and_hotload(&mut self) -> u64 {
        match self.try_hotload() {
            Ok(()) => self.warning = None,
            Err(e) => {
                log::warn!("hotload failed, staying on v{}: {e}", self.version);
                self.warning = Some(e.to_string());
            }
        }
        self.version
    }

    fn try_hotload(&mut self) -> Result<(), SyncError> {
        let manifest = read_manifest(self.store.as_ref())?;
        let head = match manifest.head() {
            Some(h) if h > self.version => h,
            _ => return Ok(()),
        };
        let (shards, _) = reconstruct_from(self.store.as_ref(), &manifest, head)?;
        let params = ToyMoEParams::from_shards(self.config, &shards).map_err(|e| SyncError::Weights(e.to_string()))?;
        self.params = Arc::new(params);
        self.version = head;
        Ok(())
    }
}

impl VersionFeed for HotloadEngine {
    fn current(&mut self) -> (u64, Arc<ToyMoEParams<f32>>) {
        if self.calls.is_multiple_of(self.poll_interval) {
            self.poll_and_hotload();
        }
        self.calls += 1;
        (self.version, self.params.clone())
    }
}

pub mod demo;

#[cfg(test)]
mod tests;
