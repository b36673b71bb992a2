//! Reward composition: task reward plus behavior rubrics minus a concave
//! length penalty, group-relative advantages, and chain credit assignment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envsim::TaskState;
use crate::rollout::{flatten_chain, ChainedRollout, CostFeatures, RolloutError, TokenCategory};
use crate::toylm::TrainingSequence;
use crate::vocab;

/// Below this distance from 1 the penalty switches to its logarithmic limit.
pub const LOG_BRANCH_WINDOW: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("length penalty domain error: {0}")]
    Domain(String),
    #[error("group advantages need at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error(transparent)]
    Chain(#[from] RolloutError),
}

/// Combination weights applied to [`CostFeatures`] to form the penalty input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyWeights {
    pub thinking_tokens: f64,
    pub tool_call_tokens: f64,
    pub tool_output_tokens: f64,
    pub final_message_tokens: f64,
    pub tool_call_count: f64,
    pub turn_count: f64,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        PenaltyWeights {
            thinking_tokens: 1.0,
            tool_call_tokens: 1.0,
            tool_output_tokens: 1.0,
            final_message_tokens: 1.0,
            tool_call_count: 10.0,
            turn_count: 25.0,
        }
    }
}

impl PenaltyWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.thinking_tokens,
            self.tool_call_tokens,
            self.tool_output_tokens,
            self.final_message_tokens,
            self.tool_call_count,
            self.turn_count,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    pub k: f64,
    pub q: f64,
    pub weights: PenaltyWeights,
    pub lambda: f64,
    pub mask_overlong: bool,
    pub max_sequence_tokens: usize,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            k: 0.01,
            q: 0.5,
            weights: PenaltyWeights::default(),
            lambda: 5e-4,
            mask_overlong: false,
            max_sequence_tokens: 64,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(RewardError::Domain(format!("k must be > 0, got {}", self.k)));
        }
        if !(self.q >= 0.0 && self.q.is_finite()) {
            return Err(RewardError::Domain(format!("q must be >= 0, got {}", self.q)));
        }
        if !(self.lambda >= 0.0) {
            return Err(RewardError::Domain(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.weights.as_array().iter().any(|w| !(*w >= 0.0)) {
            return Err(RewardError::Domain("weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReward {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub task_reward: f64,
    pub behavior_rewards: Vec<NamedReward>,
    pub length_penalty: f64,
    pub total: f64,
    /// Overlong rollout masked out of the loss; its reward is still recorded.
    #[serde(default)]
    pub zero_loss_weight: bool,
}

/// Concave increasing penalty `((1+kx)^(1-q) - 1) / (k(1-q))`, with the
/// `ln(1+kx)/k` limit at `q = 1`.
pub fn length_penalty(x: f64, k: f64, q: f64) -> Result<f64, RewardError> {
    if !(x >= 0.0 && x.is_finite()) {
        return Err(RewardError::Domain(format!("x must be finite and >= 0, got {x}")));
    }
    if !(k > 0.0 && k.is_finite()) {
        return Err(RewardError::Domain(format!("k must be > 0, got {k}")));
    }
    if !(q >= 0.0 && q.is_finite()) {
        return Err(RewardError::Domain(format!("q must be >= 0, got {q}")));
    }
    let log1p = (k * x).ln_1p();
    if (q - 1.0).abs() < LOG_BRANCH_WINDOW {
        return Ok(log1p / k);
    }
    let e = 1.0 - q;
    // expm1 keeps precision when (1-q)·ln(1+kx) is small
    Ok((e * log1p).exp_m1() / (k * e))
}

/// Weighted sum of cost features.
pub fn penalty_input(f: &CostFeatures, w: &PenaltyWeights) -> f64 {
    f.as_array().iter().zip(w.as_array()).map(|(a, b)| a * b).sum()
}

pub fn composite_reward(
    task: f64,
    behaviors: &[NamedReward],
    f: &CostFeatures,
    cfg: &PenaltyConfig,
    overlong: bool,
) -> Result<RewardBreakdown, RewardError> {
    let x = penalty_input(f, &cfg.weights);
    let length_penalty = length_penalty(x, cfg.k, cfg.q)?;
    let behavior_sum: f64 = behaviors.iter().map(|b| b.value).sum();
    Ok(RewardBreakdown {
        task_reward: task,
        behavior_rewards: behaviors.to_vec(),
        length_penalty,
        total: task + behavior_sum - cfg.lambda * length_penalty,
        zero_loss_weight: overlong && cfg.mask_overlong,
    })
}

/// Mean-centered rewards. No std normalization and no length term.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, RewardError> {
    if rewards.len() < 2 {
        return Err(RewardError::GroupTooSmall(rewards.len()));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

/// One training sequence per segment. Every model-produced token in the
/// chain, summaries included, carries the rollout's advantage; tool output
/// carries zero.
pub fn assign_chain_advantage(r: &ChainedRollout, advantage: f64) -> Result<Vec<TrainingSequence>, RewardError> {
    let segments = flatten_chain(r)?;
    let loss_weight = match &r.final_reward {
        Some(b) if b.zero_loss_weight => 0.0,
        _ => 1.0,
    };
    Ok(segments
        .into_iter()
        .map(|seg| {
            let tokens = seg.context_tokens();
            let weights = seg
                .records
                .iter()
                .map(|rec| if rec.is_trainable() { advantage } else { 0.0 })
                .collect();
            let trainable = seg.records.iter().map(|rec| rec.is_trainable()).collect();
            let sampling_logprobs = seg.records.iter().map(|rec| rec.sampling_logprob).collect();
            let versions = seg.records.iter().map(|rec| rec.policy_version).collect();
            let replay = if seg.router_traces.len() == seg.records.len() {
                seg.router_traces.clone()
            } else {
                vec![None; seg.records.len()]
            };
            TrainingSequence {
                target_start: seg.prompt_tokens.len(),
                tokens,
                weights,
                trainable,
                sampling_logprobs: Some(sampling_logprobs),
                policy_versions: versions,
                loss_weight,
                replay,
                allowed: None,
            }
        })
        .collect())
}

/// Programmatic behavior reward over a finished rollout and its environment.
pub trait BehaviorRubric: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, rollout: &ChainedRollout, env: &TaskState) -> f64;
}

/// Penalizes to-do items left open at the end of the rollout.
#[derive(Debug, Clone)]
pub struct UnfinishedTodos {
    pub penalty: f64,
}

impl BehaviorRubric for UnfinishedTodos {
    fn name(&self) -> &str {
        "todo_unfinished"
    }
    fn score(&self, _rollout: &ChainedRollout, env: &TaskState) -> f64 {
        if env.open_todos.is_empty() {
            0.0
        } else {
            -self.penalty
        }
    }
}

/// Penalizes thinking left in the final message (the toy analogue of
/// chain-of-thought written into code comments).
#[derive(Debug, Clone)]
pub struct ThinkingInFinalMessage {
    pub per_token: f64,
    pub cap: f64,
}

impl BehaviorRubric for ThinkingInFinalMessage {
    fn name(&self) -> &str {
        "cot_in_comments"
    }
    fn score(&self, rollout: &ChainedRollout, _env: &TaskState) -> f64 {
        let n = rollout
            .records()
            .filter(|r| r.category == TokenCategory::FinalMessage && r.token_id == vocab::THINK)
            .count();
        -(self.per_token * n as f64).min(self.cap)
    }
}

/// Penalizes collapsing onto a single tool.
#[derive(Debug, Clone)]
pub struct SingleToolCollapse {
    pub min_calls: usize,
    pub penalty: f64,
}

impl BehaviorRubric for SingleToolCollapse {
    fn name(&self) -> &str {
        "single_tool_collapse"
    }
    fn score(&self, rollout: &ChainedRollout, _env: &TaskState) -> f64 {
        let tools: Vec<u32> = rollout
            .records()
            .filter(|r| r.category == TokenCategory::ToolCall && vocab::is_tool(r.token_id))
            .map(|r| r.token_id)
            .collect();
        if tools.len() >= self.min_calls && tools.iter().all(|&t| t == tools[0]) {
            -self.penalty
        } else {
            0.0
        }
    }
}

/// The three toy rubrics shipped with the task suite.
pub fn default_rubrics() -> Vec<Box<dyn BehaviorRubric>> {
    vec![
        Box::new(UnfinishedTodos { penalty: 0.1 }),
        Box::new(ThinkingInFinalMessage {
            per_token: 0.05,
            cap: 0.2,
        }),
        Box::new(SingleToolCollapse {
            min_calls: 3,
            penalty: 0.1,
        }),
    ]
}

pub fn score_behaviors(
    rubrics: &[Box<dyn BehaviorRubric>],
    rollout: &ChainedRollout,
    env: &TaskState,
) -> Vec<NamedReward> {
    rubrics
        .iter()
        .map(|r| NamedReward {
            name: r.name().to_string(),
            value: r.score(rollout, env),
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod oracle {
    /// Adaptive Simpson quadrature of `(1+kt)^(-q)` over `[0, x]`.
    pub fn penalty_by_quadrature(x: f64, k: f64, q: f64) -> f64 {
        fn f(t: f64, k: f64, q: f64) -> f64 {
            (1.0 + k * t).powf(-q)
        }
        fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
            (b - a) / 6.0 * (fa + 4.0 * fm + fb)
        }
        #[allow(clippy::too_many_arguments)]
        fn rec(a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32, k: f64, q: f64) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let flm = f(lm, k, q);
            let frm = f(rm, k, q);
            let left = simpson(a, m, fa, flm, fm);
            let right = simpson(m, b, fm, frm, fb);
            let delta = left + right - whole;
            if depth == 0 || delta.abs() <= 15.0 * tol {
                return left + right + delta / 15.0;
            }
            rec(a, m, fa, flm, fm, left, tol / 2.0, depth - 1, k, q)
                + rec(m, b, fm, frm, fb, right, tol / 2.0, depth - 1, k, q)
        }
        if x == 0.0 {
            return 0.0;
        }
        // geometric panels keep the integrand well resolved when kx is large
        let mut edges = vec![0.0];
        let mut e = x.min(1.0 / k) / 64.0;
        while e < x {
            edges.push(e);
            e *= 2.0;
        }
        edges.push(x);
        edges
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0], w[1]);
                let (fa, fm, fb) = (f(a, k, q), f(0.5 * (a + b), k, q), f(b, k, q));
                let whole = simpson(a, b, fa, fm, fb);
                rec(a, b, fa, fm, fb, whole, 1e-15 * whole.abs().max(1e-300), 40, k, q)
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::fixtures::three_segment_chain;
    use proptest::prelude::*;

    #[test]
    fn penalty_fixed_points() {
        for (k, q) in [(0.01, 0.0), (0.5, 0.5), (2.0, 1.0), (0.1, 3.0)] {
            assert_eq!(length_penalty(0.0, k, q).unwrap(), 0.0);
        }
        assert!((length_penalty(250.0, 0.01, 0.0).unwrap() - 250.0).abs() < 1e-10);
    }

    #[test]
    fn penalty_matches_quadrature_at_reference_point() {
        let oracle = oracle::penalty_by_quadrature(100.0, 0.01, 0.5);
        assert!((oracle - 82.842712474619).abs() < 1e-9, "oracle {oracle}");
        let got = length_penalty(100.0, 0.01, 0.5).unwrap();
        assert!((got - oracle).abs() / oracle < 1e-9);
    }

    #[test]
    fn penalty_domain_errors() {
        assert!(length_penalty(-1.0, 0.1, 0.5).is_err());
        assert!(length_penalty(1.0, 0.0, 0.5).is_err());
        assert!(length_penalty(1.0, 0.1, -0.1).is_err());
        assert!(length_penalty(f64::NAN, 0.1, 0.5).is_err());
    }

    #[test]
    fn log_branch_is_continuous() {
        for &x in &[0.5, 10.0, 1000.0] {
            for &k in &[1e-3, 0.1, 2.0] {
                let c = length_penalty(x, k, 1.0).unwrap();
                let l = (k * x).ln_1p();
                for q in [1.0 - 1e-6, 1.0 + 1e-6, 1.0 - 1e-10, 1.0 + 1e-10] {
                    let d = length_penalty(x, k, q).unwrap();
                    // second-order expansion in (1 - q) around the log branch
                    let expect = c + (1.0 - q) * l * l / (2.0 * k);
                    assert!((d - expect).abs() < 1e-9 * (1.0 + c), "x={x} k={k} q={q}");
                }
            }
        }
    }

    #[test]
    fn composite_arithmetic() {
        let cfg = PenaltyConfig::default();
        let b = composite_reward(1.0, &[], &CostFeatures::default(), &cfg, false).unwrap();
        assert_eq!(b.total, 1.0);
        let f = CostFeatures {
            thinking_tokens: 10,
            tool_call_count: 2,
            turn_count: 1,
            ..Default::default()
        };
        let behaviors = [NamedReward {
            name: "todo_unfinished".into(),
            value: -0.2,
        }];
        let b = composite_reward(1.0, &behaviors, &f, &cfg, false).unwrap();
        let p = length_penalty(10.0 + 20.0 + 25.0, cfg.k, cfg.q).unwrap();
        assert_eq!(b.length_penalty, p);
        assert!((b.total - (0.8 - cfg.lambda * p)).abs() < 1e-15);
        assert!(!b.zero_loss_weight);
    }

    #[test]
    fn overlong_masking_flag() {
        let mut cfg = PenaltyConfig::default();
        let f = CostFeatures::default();
        assert!(!composite_reward(0.0, &[], &f, &cfg, true).unwrap().zero_loss_weight);
        cfg.mask_overlong = true;
        let b = composite_reward(0.5, &[], &f, &cfg, true).unwrap();
        assert!(b.zero_loss_weight);
        assert_eq!(b.total, 0.5);
    }

    #[test]
    fn advantages_examples() {
        assert_eq!(
            group_advantages(&[1.0, 0.0, 0.0, 1.0]).unwrap(),
            vec![0.5, -0.5, -0.5, 0.5]
        );
        assert_eq!(group_advantages(&[0.3; 5]).unwrap(), vec![0.0; 5]);
        assert_eq!(group_advantages(&[1.0]), Err(RewardError::GroupTooSmall(1)));
    }

    #[test]
    fn chain_advantage_weights_every_model_token() {
        let r = three_segment_chain();
        let seqs = assign_chain_advantage(&r, 0.5).unwrap();
        assert_eq!(seqs.len(), 3);
        for (seq, seg) in seqs.iter().zip(&r.segments) {
            assert_eq!(seq.weights.len(), seg.records.len());
            for (w, rec) in seq.weights.iter().zip(&seg.records) {
                let expect = if rec.category == TokenCategory::ToolOutput {
                    0.0
                } else {
                    0.5
                };
                assert_eq!(*w, expect);
            }
            assert_eq!(seq.tokens, seg.context_tokens());
        }
        let zero = assign_chain_advantage(&r, 0.0).unwrap();
        assert!(zero.iter().all(|s| s.weights.iter().all(|w| *w == 0.0)));
    }

    #[test]
    fn unflattenable_chain_rejected() {
        let mut r = three_segment_chain();
        r.summaries.pop();
        assert!(assign_chain_advantage(&r, 1.0).is_err());
    }

    #[test]
    fn rubric_scores() {
        use crate::rollout::fixtures::rec;
        use crate::vocab::*;
        let env = TaskState {
            open_todos: vec![20],
            ..TaskState::new(vec![20, 21])
        };
        let mut r = three_segment_chain();
        r.segments[2]
            .records
            .insert(2, rec(THINK, TokenCategory::FinalMessage, 2));
        let scores = score_behaviors(&default_rubrics(), &r, &env);
        assert_eq!(scores[0].value, -0.1);
        assert!((scores[1].value + 0.05).abs() < 1e-15);
        assert_eq!(scores[2].value, 0.0);
    }

    proptest! {
        #[test]
        fn penalty_input_is_dot_product(
            f in prop::array::uniform6(0u64..10_000),
            w in prop::array::uniform6(0.0f64..50.0),
        ) {
            let feats = CostFeatures {
                thinking_tokens: f[0], tool_call_tokens: f[1], tool_output_tokens: f[2],
                final_message_tokens: f[3], tool_call_count: f[4], turn_count: f[5],
            };
            let weights = PenaltyWeights {
                thinking_tokens: w[0], tool_call_tokens: w[1], tool_output_tokens: w[2],
                final_message_tokens: w[3], tool_call_count: w[4], turn_count: w[5],
            };
            let mut naive = 0.0;
            for i in 0..6 {
                naive += f[i] as f64 * w[i];
            }
            prop_assert_eq!(penalty_input(&feats, &weights), naive);
        }

        #[test]
        fn advantages_sum_to_zero_and_scale(rewards in prop::collection::vec(-10.0f64..10.0, 2..32), c in 0.01f64..100.0) {
            let a = group_advantages(&rewards).unwrap();
            let s: f64 = a.iter().sum();
            prop_assert!(s.abs() < 1e-12);
            let scaled: Vec<f64> = rewards.iter().map(|r| r * c).collect();
            let b = group_advantages(&scaled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x * c - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn penalty_increasing_and_concave(k in 1e-4f64..1.0, q in 0.01f64..3.0, x in 0.0f64..1e4) {
            let h = 1e-3 * (1.0 + x);
            let c0 = length_penalty(x, k, q).unwrap();
            let c1 = length_penalty(x + h, k, q).unwrap();
            let c2 = length_penalty(x + 2.0 * h, k, q).unwrap();
            prop_assert!(c1 > c0);
            prop_assert!(c2 - c1 <= (c1 - c0) * (1.0 + 1e-9));
            let d0 = (length_penalty(1e-7, k, q).unwrap() - 0.0) / 1e-7;
            prop_assert!((d0 - 1.0).abs() < 1e-6);
        }
    }
}
