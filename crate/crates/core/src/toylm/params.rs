use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ToyLmError;

/// Floating point type the model can be evaluated in.
pub trait Real: Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
    fn f64(self) -> f64 {
        self.to_f64().expect("finite")
    }
}

impl<T> Real for T where T: Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub experts: usize,
    pub top_k: usize,
    /// Plausibility factor for replayed experts.
    pub replay_alpha: f64,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: crate::vocab::VOCAB_SIZE,
            dim: 32,
            experts: 8,
            top_k: 2,
            replay_alpha: 0.5,
            init_scale: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ToyLmError> {
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(ToyLmError::Config(format!(
                "top_k must be in 1..={}, got {}",
                self.experts, self.top_k
            )));
        }
        if self.vocab == 0 || self.dim == 0 {
            return Err(ToyLmError::Config("vocab and dim must be positive".into()));
        }
        Ok(())
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `x · self` for a row vector `x` of length `rows`.
    pub fn vec_mul(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for (xi, row) in x.iter().zip(self.data.chunks_exact(self.cols)) {
            for (o, w) in out.iter_mut().zip(row) {
                *o = *o + *xi * *w;
            }
        }
        out
    }

    /// `self · y` for a column vector `y` of length `cols`.
    pub fn mul_vec(&self, y: &[T]) -> Vec<T> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(y).map(|(a, b)| *a * *b).sum())
            .collect()
    }

    /// `self += x ⊗ y`.
    pub fn add_outer(&mut self, x: &[T], y: &[T]) {
        for (xi, row) in x.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if *xi == T::zero() {
                continue;
            }
            for (o, yj) in row.iter_mut().zip(y) {
                *o = *o + *xi * *yj;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// Parameters of the toy mixture-of-experts policy.
///
/// A position's hidden state is the embedding of its token plus a context
/// embedding of the most recent key seen so far; a top-k routed layer of
/// `tanh` experts is added residually, and two heads read out next-token and
/// second-next-token (MTP) logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMoEParams<T> {
    pub config: ModelConfig,
    pub embedding: Mat<T>,
    pub context: Mat<T>,
    pub router: Mat<T>,
    pub experts: Vec<Mat<T>>,
    pub output_head: Mat<T>,
    pub mtp_head: Mat<T>,
}

impl<T: Real> ToyMoEParams<T> {
    pub fn zeros(config: ModelConfig) -> Self {
        let (v, d, e) = (config.vocab, config.dim, config.experts);
        ToyMoEParams {
            config,
            embedding: Mat::zeros(v, d),
            context: Mat::zeros(v, d),
            router: Mat::zeros(d, e),
            experts: (0..e).map(|_| Mat::zeros(d, d)).collect(),
            output_head: Mat::zeros(d, v),
            mtp_head: Mat::zeros(d, v),
        }
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ToyLmError> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = config.init_scale / (config.dim as f64).sqrt();
        for t in p.tensors_mut() {
            for v in t.data.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = T::of(z * scale);
            }
        }
        Ok(p)
    }

    pub fn tensors(&self) -> Vec<&Mat<T>> {
        let mut out = vec![&self.embedding, &self.context, &self.router];
        out.extend(self.experts.iter());
        out.push(&self.output_head);
        out.push(&self.mtp_head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat<T>> {
        let mut out = vec![&mut self.embedding, &mut self.context, &mut self.router];
        out.extend(self.experts.iter_mut());
        out.push(&mut self.output_head);
        out.push(&mut self.mtp_head);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["embedding".to_string(), "context".into(), "router".into()];
        out.extend((0..self.experts.len()).map(|e| format!("expert.{e}")));
        out.push("output_head".into());
        out.push("mtp_head".into());
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Flat parameter vector in `tensors()` order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn get_flat(&self, mut idx: usize) -> T {
        for t in self.tensors() {
            if idx < t.data.len() {
                return t.data[idx];
            }
            idx -= t.data.len();
        }
        panic!("flat index out of range")
    }

    pub fn set_flat(&mut self, mut idx: usize, v: T) {
        for t in self.tensors_mut() {
            if idx < t.data.len() {
                t.data[idx] = v;
                return;
            }
            idx -= t.data.len();
        }
        panic!("flat index out of range")
    }

    pub fn cast<U: Real>(&self) -> ToyMoEParams<U> {
        ToyMoEParams {
            config: self.config,
            embedding: self.embedding.cast(),
            context: self.context.cast(),
            router: self.router.cast(),
            experts: self.experts.iter().map(Mat::cast).collect(),
            output_head: self.output_head.cast(),
            mtp_head: self.mtp_head.cast(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub name: String,
    pub shape: Vec<usize>,
    /// Hex SHA-256 of the raw little-endian payload.
    pub digest: String,
}

/// One serialized weight tensor: `u32` LE header length, JSON header, then
/// raw little-endian `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub name: String,
    pub bytes: Vec<u8>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_shard(name: &str, shape: &[usize], values: &[f32]) -> Shard {
    let mut raw = Vec::with_capacity(values.len() * 4);
    for v in values {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    let header = ShardHeader {
        name: name.to_string(),
        shape: shape.to_vec(),
        digest: sha256_hex(&raw),
    };
    let h = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(4 + h.len() + raw.len());
    bytes.extend_from_slice(&(h.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&h);
    bytes.extend_from_slice(&raw);
    Shard {
        name: name.to_string(),
        bytes,
    }
}

pub fn decode_shard(bytes: &[u8]) -> Result<(ShardHeader, Vec<f32>), ToyLmError> {
    let bad = |m: &str| ToyLmError::Shard(m.to_string());
    if bytes.len() < 4 {
        return Err(bad("truncated shard"));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let body = bytes.get(4..4 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: ShardHeader = serde_json::from_slice(body).map_err(|e| ToyLmError::Shard(e.to_string()))?;
    let raw = &bytes[4 + hlen..];
    if sha256_hex(raw) != header.digest {
        return Err(bad("payload digest mismatch"));
    }
    let expect: usize = header.shape.iter().product();
    if raw.len() != expect * 4 {
        return Err(bad("payload length does not match shape"));
    }
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

impl ToyMoEParams<f32> {
    pub fn to_shards(&self) -> Vec<Shard> {
        self.tensor_names()
            .iter()
            .zip(self.tensors())
            .map(|(name, t)| encode_shard(name, &[t.rows, t.cols], &t.data))
            .collect()
    }

    pub fn from_shards(config: ModelConfig, shards: &[Shard]) -> Result<Self, ToyLmError> {
        let mut p = Self::zeros(config);
        let names = p.tensor_names();
        if shards.len() != names.len() {
            return Err(ToyLmError::Shard(format!(
                "expected {} shards, got {}",
                names.len(),
                shards.len()
            )));
        }
        for (t, name) in p.tensors_mut().into_iter().zip(&names) {
            let shard = shards
                .iter()
                .find(|s| &s.name == name)
                .ok_or_else(|| ToyLmError::Shard(format!("missing shard {name}")))?;
            let (header, values) = decode_shard(&shard.bytes)?;
            if header.shape != [t.rows, t.cols] {
                return Err(ToyLmError::Shard(format!("shape mismatch for {name}")));
            }
            t.data = values;
        }
        Ok(p)
    }
}

/// Adam over a flat view of the parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: Option<f64>,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ToyMoEParams<f64>, grads: &ToyMoEParams<f64>) {
        let n = params.num_params();
        if self.m.len() != n {
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
        }
        self.step += 1;
        let norm = grads
            .tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = match self.max_grad_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut i = 0;
        for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            for (w, gv) in p.data.iter_mut().zip(&g.data) {
                let gv = gv * scale;
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gv;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gv * gv;
                let mh = self.m[i] / bc1;
                let vh = self.v[i] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
                i += 1;
            }
        }
    }
}
