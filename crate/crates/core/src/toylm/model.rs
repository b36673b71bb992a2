use serde::{Deserialize, Serialize};

use super::params::{Real, ToyMoEParams};
use super::ToyLmError;
use crate::vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplaySource {
    Fresh,
    Replayed,
    Replaced,
}

/// Routing decision at one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterTrace {
    /// Softmax of the router logits over all experts.
    pub gate_scores: Vec<f32>,
    pub selected: Vec<usize>,
    pub source: ReplaySource,
}

/// Indices of the `k` largest scores, descending; ties go to the lower index.
pub fn top_k<T: Real>(scores: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Keeps a replayed expert only if its fresh gate score is at least
/// `alpha` times the smallest score in the router's own top-k; dropped slots
/// are refilled, in place, with the highest-scoring experts not yet selected.
pub fn replay_filter<T: Real>(gates: &[T], replayed: &[usize], k: usize, alpha: f64) -> Vec<usize> {
    let floor = top_k(gates, k)
        .into_iter()
        .map(|e| gates[e])
        .fold(T::infinity(), T::min);
    let threshold = T::of(alpha) * floor;
    let mut out: Vec<Option<usize>> = replayed
        .iter()
        .take(k)
        .map(|&e| (gates[e] >= threshold).then_some(e))
        .collect();
    let mut ranked = top_k(gates, gates.len()).into_iter();
    for i in 0..out.len() {
        if out[i].is_none() {
            let pick = ranked
                .by_ref()
                .find(|c| !out.contains(&Some(*c)))
                .expect("more experts than top_k");
            out[i] = Some(pick);
        }
    }
    out.into_iter().flatten().collect()
}

/// Cached activations of one position, enough for backprop.
#[derive(Debug, Clone)]
pub struct PositionCache<T> {
    pub token: u32,
    pub last_key: Option<u32>,
    pub h0: Vec<T>,
    pub router_logits: Vec<T>,
    pub selected: Vec<usize>,
    /// Combine weights over `selected` (softmax of their router logits).
    pub combine: Vec<T>,
    /// `tanh` expert outputs for each selected expert.
    pub expert_out: Vec<Vec<T>>,
    pub h1: Vec<T>,
    pub logits: Vec<T>,
    pub mtp_logits: Vec<T>,
    pub trace: RouterTrace,
}

pub fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|v| (*v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Log-softmax restricted to `allowed` (all tokens when `None`). Entries
/// outside the allowed set are `-inf`.
pub fn masked_log_softmax<T: Real>(logits: &[T], allowed: Option<&[u32]>) -> Vec<T> {
    match allowed {
        None => {
            let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + logits.iter().map(|v| (*v - m).exp()).sum::<T>().ln();
            logits.iter().map(|v| *v - lse).collect()
        }
        Some(set) => {
            let m = set.iter().map(|&t| logits[t as usize]).fold(T::neg_infinity(), T::max);
            let lse = m + set.iter().map(|&t| (logits[t as usize] - m).exp()).sum::<T>().ln();
            let mut out = vec![T::neg_infinity(); logits.len()];
            for &t in set {
                out[t as usize] = logits[t as usize] - lse;
            }
            out
        }
    }
}

/// Evaluates one position given its token and the most recent key.
pub fn forward_position<T: Real>(
    p: &ToyMoEParams<T>,
    token: u32,
    last_key: Option<u32>,
    replay: Option<&RouterTrace>,
) -> Result<PositionCache<T>, ToyLmError> {
    let cfg = &p.config;
    if token as usize >= cfg.vocab || last_key.is_some_and(|k| k as usize >= cfg.vocab) {
        return Err(ToyLmError::Token(token));
    }
    let mut h0 = p.embedding.row(token as usize).to_vec();
    if let Some(k) = last_key {
        for (h, c) in h0.iter_mut().zip(p.context.row(k as usize)) {
            *h = *h + *c;
        }
    }
    let router_logits = p.router.vec_mul(&h0);
    let gates = softmax(&router_logits);
    let (selected, source) = match replay {
        None => (top_k(&router_logits, cfg.top_k), ReplaySource::Fresh),
        Some(tr) => {
            if tr.selected.len() != cfg.top_k {
                return Err(ToyLmError::Replay(format!(
                    "replay selects {} experts, top_k is {}",
                    tr.selected.len(),
                    cfg.top_k
                )));
            }
            if let Some(&bad) = tr.selected.iter().find(|&&e| e >= cfg.experts) {
                return Err(ToyLmError::Replay(format!("expert index {bad} out of range")));
            }
            let filtered = replay_filter(&gates, &tr.selected, cfg.top_k, cfg.replay_alpha);
            let source = if filtered == tr.selected {
                ReplaySource::Replayed
            } else {
                ReplaySource::Replaced
            };
            (filtered, source)
        }
    };
    let sel_logits: Vec<T> = selected.iter().map(|&e| router_logits[e]).collect();
    let combine = softmax(&sel_logits);
    let expert_out: Vec<Vec<T>> = selected
        .iter()
        .map(|&e| p.experts[e].vec_mul(&h0).into_iter().map(|a| a.tanh()).collect())
        .collect();
    let mut h1 = h0.clone();
    for (w, u) in combine.iter().zip(&expert_out) {
        for (h, v) in h1.iter_mut().zip(u) {
            *h = *h + *w * *v;
        }
    }
    let logits = p.output_head.vec_mul(&h1);
    let mtp_logits = p.mtp_head.vec_mul(&h1);
    let trace = RouterTrace {
        gate_scores: gates.iter().map(|g| g.f64() as f32).collect(),
        selected: selected.clone(),
        source,
    };
    Ok(PositionCache {
        token,
        last_key,
        h0,
        router_logits,
        selected,
        combine,
        expert_out,
        h1,
        logits,
        mtp_logits,
        trace,
    })
}

/// Forward over every position of `tokens`. `replay[i]`, when present,
/// overrides the expert selection at position `i`.
pub fn forward_cached<T: Real>(
    p: &ToyMoEParams<T>,
    tokens: &[u32],
    replay: Option<&[Option<RouterTrace>]>,
) -> Result<Vec<PositionCache<T>>, ToyLmError> {
    if let Some(r) = replay {
        if r.len() != tokens.len() {
            return Err(ToyLmError::Replay(format!(
                "replay covers {} positions, sequence has {}",
                r.len(),
                tokens.len()
            )));
        }
    }
    let keys = vocab::last_key_prefix(tokens);
    tokens
        .iter()
        .zip(keys)
        .enumerate()
        .map(|(i, (&t, k))| {
            let tr = replay.and_then(|r| r[i].as_ref());
            forward_position(p, t, k, tr)
        })
        .collect()
}

/// Next-token logits and routing traces for every position.
pub fn forward<T: Real>(
    p: &ToyMoEParams<T>,
    tokens: &[u32],
    replay: Option<&[Option<RouterTrace>]>,
) -> Result<(Vec<Vec<T>>, Vec<RouterTrace>), ToyLmError> {
    let caches = forward_cached(p, tokens, replay)?;
    Ok(caches.into_iter().map(|c| (c.logits, c.trace)).unzip())
}

/// Accumulates parameter gradients of one position given upstream
/// gradients on its main logits and (detached-trunk) MTP logits.
pub fn backward_position<T: Real>(
    p: &ToyMoEParams<T>,
    c: &PositionCache<T>,
    dlogits: Option<&[T]>,
    dmtp: Option<&[T]>,
    g: &mut ToyMoEParams<T>,
) {
    if let Some(dm) = dmtp {
        // MTP distillation trains the MTP head only
        g.mtp_head.add_outer(&c.h1, dm);
    }
    let Some(dl) = dlogits else {
        return;
    };
    g.output_head.add_outer(&c.h1, dl);
    let dh1 = p.output_head.mul_vec(dl);
    let mut dh0 = dh1.clone();
    let dw: Vec<T> = c
        .expert_out
        .iter()
        .map(|u| u.iter().zip(&dh1).map(|(a, b)| *a * *b).sum())
        .collect();
    for ((&e, w), u) in c.selected.iter().zip(&c.combine).zip(&c.expert_out) {
        let da: Vec<T> = u
            .iter()
            .zip(&dh1)
            .map(|(uv, d)| *w * *d * (T::one() - *uv * *uv))
            .collect();
        g.experts[e].add_outer(&c.h0, &da);
        for (h, v) in dh0.iter_mut().zip(p.experts[e].mul_vec(&da)) {
            *h = *h + v;
        }
    }
    let wdw: T = c.combine.iter().zip(&dw).map(|(a, b)| *a * *b).sum();
    let mut dz = vec![T::zero(); p.config.experts];
    for ((&e, w), d) in c.selected.iter().zip(&c.combine).zip(&dw) {
        dz[e] = *w * (*d - wdw);
    }
    g.router.add_outer(&c.h0, &dz);
    for (h, v) in dh0.iter_mut().zip(p.router.mul_vec(&dz)) {
        *h = *h + v;
    }
    for (a, d) in g.embedding.row_mut(c.token as usize).iter_mut().zip(&dh0) {
        *a = *a + *d;
    }
    if let Some(k) = c.last_key {
        for (a, d) in g.context.row_mut(k as usize).iter_mut().zip(&dh0) {
            *a = *a + *d;
        }
    }
}
