use serde::{Deserialize, Serialize};

use super::model::{backward_position, forward_cached, masked_log_softmax, softmax, RouterTrace};
use super::params::{Real, ToyMoEParams};
use super::ToyLmError;
use crate::klmath::EstimatorKind;

/// One context segment prepared for the policy loss.
///
/// `tokens` is the full context (prompt then records). Record `i` sits at
/// `tokens[target_start + i]` and is predicted from position
/// `target_start + i - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSequence {
    pub tokens: Vec<u32>,
    pub target_start: usize,
    /// Per-record advantage weight (zero for tool output).
    pub weights: Vec<f64>,
    pub trainable: Vec<bool>,
    pub sampling_logprobs: Option<Vec<f64>>,
    pub policy_versions: Vec<u64>,
    /// Zero for rollouts masked out of the loss.
    pub loss_weight: f64,
    /// Routing recorded at sampling time, per record.
    pub replay: Vec<Option<RouterTrace>>,
    /// Allowed-token set at each record, when decoding was constrained.
    pub allowed: Option<Vec<Vec<u32>>>,
}

impl TrainingSequence {
    pub fn num_targets(&self) -> usize {
        self.tokens.len() - self.target_start
    }

    /// Positions fed to the model: everything but the final token.
    fn positions(&self) -> &[u32] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Replay traces aligned with [`Self::positions`].
    fn replay_by_position(&self) -> Vec<Option<RouterTrace>> {
        let mut out = vec![None; self.tokens.len() - 1];
        for (i, tr) in self.replay.iter().enumerate() {
            if let Some(slot) = out.get_mut(self.target_start + i - 1) {
                *slot = tr.clone();
            }
        }
        out
    }

    fn validate(&self) -> Result<(), ToyLmError> {
        let n = self.num_targets();
        if self.target_start == 0 || self.target_start > self.tokens.len() {
            return Err(ToyLmError::Batch("sequence needs a non-empty prompt".into()));
        }
        let lp = self.sampling_logprobs.as_ref().ok_or(ToyLmError::MissingLogprobs)?;
        if self.weights.len() != n || self.trainable.len() != n || lp.len() != n {
            return Err(ToyLmError::Batch("per-record arrays do not match records".into()));
        }
        if !self.replay.is_empty() && self.replay.len() != n {
            return Err(ToyLmError::Batch("replay does not match records".into()));
        }
        if let Some(a) = &self.allowed {
            if a.len() != n {
                return Err(ToyLmError::Batch("allowed sets do not match records".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KLRegConfig {
    pub beta: f64,
    pub reference_version: u64,
    pub estimator: EstimatorKind,
}

impl Default for KLRegConfig {
    fn default() -> Self {
        KLRegConfig {
            beta: 0.0,
            reference_version: 0,
            estimator: EstimatorKind::K1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kl: KLRegConfig,
    /// PPO-style ratio clipping; `None` disables it.
    pub clip_eps: Option<f64>,
    pub mtp_coef: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kl: KLRegConfig::default(),
            clip_eps: Some(0.2),
            mtp_coef: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossMetrics {
    pub policy_loss: f64,
    pub kl_loss: f64,
    pub mtp_loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    /// Mean per-token estimate of KL(policy || reference).
    pub kl_estimate: f64,
    pub tokens: usize,
}

/// Mean `KL(softmax(main) || softmax(mtp))` over aligned positions.
pub fn mtp_distill_loss<T: Real>(main_logits: &[Vec<T>], mtp_logits: &[Vec<T>]) -> Result<f64, ToyLmError> {
    Ok(mtp_distill_with_grad(main_logits, mtp_logits)?.0)
}

/// Loss plus its gradient with respect to the MTP logits. The main logits
/// are a constant target, so they receive no gradient.
pub fn mtp_distill_with_grad<T: Real>(
    main_logits: &[Vec<T>],
    mtp_logits: &[Vec<T>],
) -> Result<(f64, Vec<Vec<T>>), ToyLmError> {
    if main_logits.len() != mtp_logits.len() || main_logits.iter().zip(mtp_logits).any(|(a, b)| a.len() != b.len()) {
        return Err(ToyLmError::Shape("main and MTP logits are not aligned".into()));
    }
    if main_logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = T::of(main_logits.len() as f64);
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(mtp_logits.len());
    for (m, q) in main_logits.iter().zip(mtp_logits) {
        let lp = masked_log_softmax(m, None);
        let lq = masked_log_softmax(q, None);
        let kl: T = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (*a - *b)).sum();
        total = total + kl;
        let p = softmax(m);
        let qs = softmax(q);
        grads.push(qs.iter().zip(&p).map(|(a, b)| (*a - *b) / n).collect());
    }
    Ok(((total / n).f64(), grads))
}

/// Clipped importance-weighted policy-gradient loss with a KL penalty to a
/// reference policy and an optional MTP distillation term.
///
/// The policy term is summed over tokens and divided by the number of
/// sequences (no per-sequence length normalization).
pub fn loss_and_grad<T: Real>(
    params: &ToyMoEParams<T>,
    batch: &[TrainingSequence],
    cfg: &LossConfig,
    reference: Option<&ToyMoEParams<T>>,
) -> Result<(f64, ToyMoEParams<T>, LossMetrics), ToyLmError> {
    if batch.is_empty() {
        return Err(ToyLmError::Batch("empty batch".into()));
    }
    let beta = cfg.kl.beta;
    if beta > 0.0 && reference.is_none() {
        return Err(ToyLmError::Batch("KL penalty needs reference parameters".into()));
    }
    for s in batch {
        s.validate()?;
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut grads = ToyMoEParams::zeros(params.config);
    let mut m = LossMetrics::default();
    let (mut ratio_sum, mut clipped, mut kl_sum) = (0.0, 0usize, 0.0);
    let mut mtp_main: Vec<Vec<T>> = Vec::new();
    let mut mtp_pred: Vec<Vec<T>> = Vec::new();
    let mut mtp_owner: Vec<(usize, usize)> = Vec::new();
    let mut all_caches = Vec::with_capacity(batch.len());

    for (si, seq) in batch.iter().enumerate() {
        let positions = seq.positions();
        let replay = seq.replay_by_position();
        let caches = forward_cached(params, positions, Some(&replay))?;
        let ref_caches = match reference {
            Some(r) if beta > 0.0 => Some(forward_cached(r, positions, Some(&replay))?),
            _ => None,
        };
        let lps = seq.sampling_logprobs.as_ref().expect("validated");
        let mut dlogits: Vec<Option<Vec<T>>> = vec![None; caches.len()];
        for i in 0..seq.num_targets() {
            if !seq.trainable[i] || seq.loss_weight == 0.0 {
                continue;
            }
            let pos = seq.target_start + i - 1;
            let target = seq.tokens[seq.target_start + i] as usize;
            let allowed = seq.allowed.as_ref().map(|a| a[i].as_slice());
            let logp_all = masked_log_softmax(&caches[pos].logits, allowed);
            let logp = logp_all[target].f64();
            if !logp.is_finite() {
                return Err(ToyLmError::Batch(format!("target {target} outside allowed set")));
            }
            let ratio = (logp - lps[i]).exp();
            let adv = seq.weights[i];
            let unclipped = ratio * adv;
            // d(loss)/d(log pi) for this token
            let mut coef = match cfg.clip_eps {
                Some(eps) => {
                    let r = ratio.clamp(1.0 - eps, 1.0 + eps);
                    if (ratio - r).abs() > 0.0 {
                        clipped += 1;
                    }
                    let surrogate = unclipped.min(r * adv);
                    m.policy_loss -= inv_b * seq.loss_weight * surrogate;
                    if unclipped <= r * adv {
                        -inv_b * seq.loss_weight * adv * ratio
                    } else {
                        0.0
                    }
                }
                None => {
                    m.policy_loss -= inv_b * seq.loss_weight * unclipped;
                    -inv_b * seq.loss_weight * adv * ratio
                }
            };
            ratio_sum += ratio;
            m.tokens += 1;
            if let Some(rc) = &ref_caches {
                let ref_lp = masked_log_softmax(&rc[pos].logits, allowed)[target].f64();
                // r = p_ref / pi, samples from the policy
                let log_r = ref_lp - logp;
                let k = cfg.kl.estimator;
                m.kl_loss += beta * inv_b * seq.loss_weight * k.value(log_r);
                coef -= beta * inv_b * seq.loss_weight * k.dvalue(log_r);
                kl_sum += -log_r;
            }
            if coef != 0.0 {
                let c = T::of(coef);
                let p: Vec<T> = logp_all.iter().map(|v| v.exp()).collect();
                let mut d: Vec<T> = p.into_iter().map(|pv| -c * pv).collect();
                d[target] = d[target] + c;
                dlogits[pos] = Some(d);
            }
        }
        if cfg.mtp_coef > 0.0 {
            for t in 0..caches.len().saturating_sub(1) {
                mtp_main.push(caches[t + 1].logits.clone());
                mtp_pred.push(caches[t].mtp_logits.clone());
                mtp_owner.push((si, t));
            }
        }
        all_caches.push((caches, dlogits));
    }

    let mut dmtp: Vec<Vec<Option<Vec<T>>>> = all_caches.iter().map(|(c, _)| vec![None; c.len()]).collect();
    if cfg.mtp_coef > 0.0 && !mtp_main.is_empty() {
        let (l, g) = mtp_distill_with_grad(&mtp_main, &mtp_pred)?;
        m.mtp_loss = cfg.mtp_coef * l;
        let c = T::of(cfg.mtp_coef);
        for ((si, t), gv) in mtp_owner.into_iter().zip(g) {
            dmtp[si][t] = Some(gv.into_iter().map(|v| v * c).collect());
        }
    }

    for ((caches, dlogits), dm) in all_caches.iter().zip(&dmtp) {
        for ((c, dl), dmv) in caches.iter().zip(dlogits).zip(dm) {
            if dl.is_some() || dmv.is_some() {
                backward_position(params, c, dl.as_deref(), dmv.as_deref(), &mut grads);
            }
        }
    }

    if m.tokens > 0 {
        m.mean_ratio = ratio_sum / m.tokens as f64;
        m.clip_fraction = clipped as f64 / m.tokens as f64;
        m.kl_estimate = kl_sum / m.tokens as f64;
    }
    let loss = m.policy_loss + m.kl_loss + m.mtp_loss;
    Ok((loss, grads, m))
}
