use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::klmath::EstimatorKind;
use crate::vocab::{self, Grammar};

fn params(seed: u64) -> ToyMoEParams<f64> {
    ToyMoEParams::init(ModelConfig::default(), seed).unwrap()
}

struct ChainEnv {
    next: std::collections::HashMap<u32, u32>,
}

impl ChainEnv {
    fn new(keys: &[u32]) -> Self {
        ChainEnv {
            next: keys.windows(2).map(|w| (w[0], w[1])).collect(),
        }
    }
}

impl ToolEnv for ChainEnv {
    fn call_tool(&mut self, tool: u32, arg: u32) -> Result<Vec<u32>, String> {
        Ok(match tool {
            vocab::LOOKUP => vec![*self.next.get(&arg).unwrap_or(&vocab::NIL)],
            _ => vec![],
        })
    }
}

/// Random sequences shaped like sampled segments, with off-policy
/// sampling log-probs, allowed sets and replay traces from `sampler`.
fn random_batch(
    p: &ToyMoEParams<f64>,
    sampler: &ToyMoEParams<f64>,
    seed: u64,
    on_policy: bool,
) -> Vec<TrainingSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grammar = Grammar { context_budget: 64 };
    (0..4)
        .map(|_| {
            let mut tokens = vec![vocab::BOS, 16 + rng.gen_range(0..48)];
            let target_start = tokens.len();
            let mut weights = Vec::new();
            let mut trainable = Vec::new();
            let mut allowed_sets = Vec::new();
            let len = rng.gen_range(3..10);
            let adv = rng.gen_range(-1.0..1.0);
            for _ in 0..len {
                let mut allowed = grammar.allowed_next(&tokens);
                if allowed.is_empty() {
                    break;
                }
                if allowed.len() == 1 {
                    allowed = (0..64).collect();
                }
                let t = allowed[rng.gen_range(0..allowed.len())];
                let is_output = rng.gen_bool(0.15);
                tokens.push(if is_output { 16 + rng.gen_range(0..48) } else { t });
                trainable.push(!is_output);
                weights.push(if is_output { 0.0 } else { adv });
                allowed_sets.push(if is_output { (0..64).collect() } else { allowed });
            }
            let n = tokens.len() - target_start;
            // replay comes from the (stale) sampler's own routing
            let (_, traces) = forward(sampler, &tokens[..tokens.len() - 1], None).unwrap();
            let replay: Vec<Option<RouterTrace>> = (0..n).map(|i| Some(traces[target_start + i - 1].clone())).collect();
            let caches = forward_cached(p, &tokens[..tokens.len() - 1], None).unwrap();
            let lps = (0..n)
                .map(|i| {
                    let lp = masked_log_softmax(&caches[target_start + i - 1].logits, Some(&allowed_sets[i]));
                    let base = lp[tokens[target_start + i] as usize];
                    if on_policy {
                        base
                    } else {
                        base + rng.gen_range(-0.4..0.4)
                    }
                })
                .collect();
            TrainingSequence {
                tokens,
                target_start,
                weights,
                trainable,
                sampling_logprobs: Some(lps),
                policy_versions: vec![0; n],
                loss_weight: 1.0,
                replay,
                allowed: Some(allowed_sets),
            }
        })
        .collect()
}

fn perturbed(p: &ToyMoEParams<f64>, seed: u64, scale: f64) -> ToyMoEParams<f64> {
    let mut q = p.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in q.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += scale * rng.gen_range(-1.0..1.0);
        }
    }
    q
}

#[test]
fn zero_advantage_zero_gradient() {
    let p = params(1);
    let mut batch = random_batch(&p, &p, 7, false);
    for s in &mut batch {
        s.weights.iter_mut().for_each(|w| *w = 0.0);
    }
    let (_, g, _) = loss_and_grad(&p, &batch, &LossConfig::default(), None).unwrap();
    let max = g.flatten().into_iter().fold(0.0f64, |a, b| a.max(b.abs()));
    assert!(max < 1e-12, "max |g| = {max}");
}

#[test]
fn on_policy_gradient_matches_reinforce_oracle() {
    let p = params(2);
    let batch = random_batch(&p, &p, 11, true);
    let cfg = LossConfig {
        clip_eps: Some(0.2),
        ..Default::default()
    };
    let (_, g, m) = loss_and_grad(&p, &batch, &cfg, None).unwrap();
    assert!((m.mean_ratio - 1.0).abs() < 1e-12);

    // score-function oracle: d/dθ of -(1/B) Σ A log π, by central differences
    let objective = |q: &ToyMoEParams<f64>| -> f64 {
        let mut total = 0.0;
        for s in &batch {
            let mut replay = vec![None; s.tokens.len() - 1];
            for (i, tr) in s.replay.iter().enumerate() {
                replay[s.target_start + i - 1] = tr.clone();
            }
            let caches = forward_cached(q, &s.tokens[..s.tokens.len() - 1], Some(&replay)).unwrap();
            for i in 0..s.num_targets() {
                if !s.trainable[i] {
                    continue;
                }
                let allowed = &s.allowed.as_ref().unwrap()[i];
                let lp = masked_log_softmax(&caches[s.target_start + i - 1].logits, Some(allowed));
                total += s.weights[i] * lp[s.tokens[s.target_start + i] as usize];
            }
        }
        -total / batch.len() as f64
    };
    let h = 1e-5;
    let mut q = p.clone();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..p.num_params() {
        let orig = q.get_flat(i);
        q.set_flat(i, orig + h);
        let up = objective(&q);
        q.set_flat(i, orig - h);
        let dn = objective(&q);
        q.set_flat(i, orig);
        let fd = (up - dn) / (2.0 * h);
        let a = g.get_flat(i);
        num += (a - fd) * (a - fd);
        den += fd * fd;
    }
    let rel = (num / den).sqrt();
    assert!(rel < 1e-6, "relative error {rel}");
}

/// Flat indices of the MTP head (the last tensor).
fn mtp_range(p: &ToyMoEParams<f64>) -> std::ops::Range<usize> {
    let n = p.num_params();
    n - p.mtp_head.data.len()..n
}

/// Central-difference check on random coordinates with nonzero gradient.
pub(crate) fn finite_difference_check(
    p: &ToyMoEParams<f64>,
    batch: &[TrainingSequence],
    cfg: &LossConfig,
    reference: Option<&ToyMoEParams<f64>>,
    coords: usize,
    seed: u64,
    only: Option<std::ops::Range<usize>>,
) -> f64 {
    let (_, g, _) = loss_and_grad(p, batch, cfg, reference).unwrap();
    let range = only.unwrap_or(0..p.num_params());
    let live: Vec<usize> = range.filter(|&i| g.get_flat(i).abs() > 1e-5).collect();
    assert!(live.len() >= coords);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut q = p.clone();
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let i = live[rng.gen_range(0..live.len())];
        let orig = q.get_flat(i);
        q.set_flat(i, orig + h);
        let up = loss_and_grad(&q, batch, cfg, reference).unwrap().0;
        q.set_flat(i, orig - h);
        let dn = loss_and_grad(&q, batch, cfg, reference).unwrap().0;
        q.set_flat(i, orig);
        let fd = (up - dn) / (2.0 * h);
        let a = g.get_flat(i);
        let rel = (a - fd).abs() / a.abs().max(fd.abs());
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn gradient_matches_finite_differences_with_replay_and_kl() {
    let p = params(3);
    let stale = perturbed(&p, 5, 0.3);
    let reference = perturbed(&p, 6, 0.1);
    let mut batch = random_batch(&p, &stale, 13, false);
    batch[1].loss_weight = 0.5;
    let replaced = batch
        .iter()
        .flat_map(|s| {
            let mut replay = vec![None; s.tokens.len() - 1];
            for (i, tr) in s.replay.iter().enumerate() {
                replay[s.target_start + i - 1] = tr.clone();
            }
            forward(&p, &s.tokens[..s.tokens.len() - 1], Some(&replay)).unwrap().1
        })
        .filter(|t| t.source != ReplaySource::Fresh)
        .count();
    assert!(replaced > 0);
    for estimator in EstimatorKind::ALL {
        let cfg = LossConfig {
            kl: KLRegConfig {
                beta: 0.3,
                reference_version: 0,
                estimator,
            },
            clip_eps: Some(0.2),
            mtp_coef: 0.0,
        };
        let worst = finite_difference_check(&p, &batch, &cfg, Some(&reference), 50, 17, None);
        assert!(worst < 1e-4, "{estimator:?}: worst relative error {worst}");
    }
    // the distillation target is detached, so only the MTP head is checked
    let cfg = LossConfig {
        mtp_coef: 0.5,
        ..Default::default()
    };
    let worst = finite_difference_check(&p, &batch, &cfg, None, 50, 19, Some(mtp_range(&p)));
    assert!(worst < 1e-4, "mtp: worst relative error {worst}");
}

#[test]
fn masked_rollouts_contribute_nothing() {
    let p = params(4);
    let reference = perturbed(&p, 1, 0.1);
    let mut batch = random_batch(&p, &p, 19, false);
    for s in &mut batch {
        s.loss_weight = 0.0;
    }
    let cfg = LossConfig {
        kl: KLRegConfig {
            beta: 0.5,
            ..Default::default()
        },
        ..Default::default()
    };
    let (loss, g, _) = loss_and_grad(&p, &batch, &cfg, Some(&reference)).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.flatten().iter().all(|v| *v == 0.0));
}

#[test]
fn mtp_gradient_reaches_only_mtp_head() {
    let p = params(5);
    let mut batch = random_batch(&p, &p, 23, false);
    for s in &mut batch {
        s.weights.iter_mut().for_each(|w| *w = 0.0);
    }
    let cfg = LossConfig {
        mtp_coef: 1.0,
        ..Default::default()
    };
    let (loss, g, m) = loss_and_grad(&p, &batch, &cfg, None).unwrap();
    assert!(loss > 0.0 && m.mtp_loss > 0.0);
    for (name, t) in g.tensor_names().iter().zip(g.tensors()) {
        let nonzero = t.data.iter().any(|v| *v != 0.0);
        assert_eq!(nonzero, name == "mtp_head", "{name}");
    }
}

#[test]
fn fresh_forward_and_noop_replay() {
    let p = params(6);
    let tokens = [vocab::BOS, 20, vocab::LOOKUP, 20, 31, vocab::THINK];
    let (logits, traces) = forward(&p, &tokens, None).unwrap();
    for (i, t) in traces.iter().enumerate() {
        assert_eq!(t.source, ReplaySource::Fresh);
        let caches = forward_cached(&p, &tokens, None).unwrap();
        assert_eq!(t.selected, top_k(&caches[i].router_logits, 2));
    }
    let replay: Vec<Option<RouterTrace>> = traces.iter().cloned().map(Some).collect();
    let (again, traces2) = forward(&p, &tokens, Some(&replay)).unwrap();
    assert_eq!(logits, again);
    assert!(traces2.iter().all(|t| t.source == ReplaySource::Replayed));
    // determinism
    assert_eq!(forward(&p, &tokens, Some(&replay)).unwrap().0, again);
}

#[test]
fn implausible_replay_matches_filter_oracle() {
    let mut p = params(7);
    p.config.replay_alpha = 1.0;
    let tokens = [vocab::BOS, 22];
    let caches = forward_cached(&p, &tokens, None).unwrap();
    let c = &caches[1];
    let gates = softmax(&c.router_logits);
    let ranked = top_k(&gates, gates.len());
    let worst = *ranked.last().unwrap();
    let replayed = vec![ranked[0], worst];
    // oracle: apply the plausibility rule by hand
    let floor = gates[ranked[0]].min(gates[ranked[1]]);
    let alpha = p.config.replay_alpha;
    let mut expect = replayed.clone();
    for slot in expect.iter_mut() {
        if gates[*slot] < alpha * floor {
            *slot = usize::MAX;
        }
    }
    for i in 0..expect.len() {
        if expect[i] == usize::MAX {
            expect[i] = *ranked.iter().find(|e| !expect.contains(e)).unwrap();
        }
    }
    assert_eq!(expect, vec![ranked[0], ranked[1]]);
    let trace = |sel: Vec<usize>| RouterTrace {
        gate_scores: vec![],
        selected: sel,
        source: ReplaySource::Fresh,
    };
    let (got, tr) = forward(&p, &tokens, Some(&[None, Some(trace(replayed))])).unwrap();
    assert_eq!(tr[1].source, ReplaySource::Replaced);
    let (oracle, _) = forward(&p, &tokens, Some(&[None, Some(trace(expect))])).unwrap();
    assert_eq!(got[1], oracle[1]);
}

fn f32_params(seed: u64) -> Arc<ToyMoEParams<f32>> {
    Arc::new(ToyMoEParams::<f32>::init(ModelConfig::default(), seed).unwrap())
}

#[test]
fn static_feed_single_version() {
    let mut feed = StaticFeed {
        version: 3,
        params: f32_params(1),
    };
    let mut env = ChainEnv::new(&[20, 21, 22]);
    let r = sample(&mut feed, vec![vocab::BOS, 20], &mut env, SampleConfig::default(), 5).unwrap();
    assert!(r.total_tokens() > 0);
    assert!(r.records().all(|x| x.policy_version == 3));
    r.check_links().unwrap();
}

#[test]
fn scripted_feed_advances_once() {
    let a = f32_params(1);
    let b = f32_params(2);
    let mut feed = ScriptedFeed::new(vec![(0, 4, a), (3, 5, b)]);
    let mut env = ChainEnv::new(&[20, 21, 22, 23]);
    let cfg = SampleConfig {
        max_tokens: 40,
        ..Default::default()
    };
    let r = sample(&mut feed, vec![vocab::BOS, 20], &mut env, cfg, 9).unwrap();
    let versions: Vec<u64> = r.records().map(|x| x.policy_version).collect();
    assert!(versions.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(versions.windows(2).filter(|w| w[0] != w[1]).count(), 1);
    assert_eq!(versions[0], 4);
    assert_eq!(*versions.last().unwrap(), 5);
}

#[test]
fn recorded_logprobs_match_recomputation() {
    let versions = [f32_params(1), f32_params(2), f32_params(3)];
    let mut feed = ScriptedFeed::new(vec![
        (0, 0, versions[0].clone()),
        (4, 1, versions[1].clone()),
        (9, 2, versions[2].clone()),
    ]);
    let mut env = ChainEnv::new(&[20, 21, 22, 23, 24]);
    let cfg = SampleConfig {
        grammar: Grammar { context_budget: 12 },
        max_tokens: 60,
        temperature: 1.0,
    };
    for seed in 0..20 {
        let r = sample(&mut feed, vec![vocab::BOS, 20], &mut env, cfg, seed).unwrap();
        for seg in &r.segments {
            for (i, rec) in seg.records.iter().enumerate() {
                let p = &versions[rec.policy_version as usize];
                let lp = recompute_logprobs(p, seg, &cfg.grammar, 1.0).unwrap();
                if let Some(v) = lp[i] {
                    assert!((v - rec.sampling_logprob).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn context_budget_triggers_summaries() {
    let mut feed = StaticFeed {
        version: 0,
        params: f32_params(4),
    };
    let mut env = ChainEnv::new(&[20, 21, 22]);
    let cfg = SampleConfig {
        grammar: Grammar { context_budget: 10 },
        max_tokens: 60,
        temperature: 1.0,
    };
    let chained = (0..20)
        .map(|s| sample(&mut feed, vec![vocab::BOS, 20], &mut env, cfg, s).unwrap())
        .filter(|r| r.segments.len() > 1)
        .count();
    assert!(chained > 0);
}
