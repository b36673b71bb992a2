//! Rollout data model shared by every subsystem: per-token records, context
//! segments linked by self-summaries, prompt groups, and cost features.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::reward::RewardBreakdown;
use crate::toylm::RouterTrace;

#[derive(Debug, Error, PartialEq)]
pub enum RolloutError {
    #[error("chain has {segments} segments but {summaries} summaries")]
    SummaryCount { segments: usize, summaries: usize },
    #[error("segment {segment} prompt does not begin with its link summary")]
    BrokenLink { segment: usize },
    #[error("group has {got} rollouts, expected {expected}")]
    GroupSize { got: usize, expected: usize },
    #[error("group mixes rollouts of different prompts")]
    MixedPrompts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCategory {
    Thinking,
    ToolCall,
    ToolOutput,
    FinalMessage,
    Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token_id: u32,
    pub category: TokenCategory,
    /// Log-probability (nats) under the sampling policy. Zero for tool output.
    pub sampling_logprob: f64,
    pub policy_version: u64,
}

impl TokenRecord {
    /// Tool output is produced by the environment and never trained on.
    pub fn is_trainable(&self) -> bool {
        self.category != TokenCategory::ToolOutput
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Segment {
    pub prompt_tokens: Vec<u32>,
    pub records: Vec<TokenRecord>,
    pub tool_calls: u32,
    pub turns: u32,
    /// Routing decisions made while sampling each record (absent for tool
    /// output). Replayed by the trainer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub router_traces: Vec<Option<RouterTrace>>,
}

impl Segment {
    /// Prompt followed by every record token.
    pub fn context_tokens(&self) -> Vec<u32> {
        self.prompt_tokens
            .iter()
            .copied()
            .chain(self.records.iter().map(|r| r.token_id))
            .collect()
    }

    pub fn trainable_tokens(&self) -> usize {
        self.records.iter().filter(|r| r.is_trainable()).count()
    }

    /// Trailing summary-category tokens, i.e. the link to the next segment.
    pub fn trailing_summary(&self) -> Vec<u32> {
        let n = self
            .records
            .iter()
            .rev()
            .take_while(|r| r.category == TokenCategory::Summary)
            .count();
        self.records[self.records.len() - n..]
            .iter()
            .map(|r| r.token_id)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChainedRollout {
    pub segments: Vec<Segment>,
    pub summaries: Vec<Vec<u32>>,
    pub env_snapshot_ref: Option<String>,
    pub final_reward: Option<RewardBreakdown>,
    /// Rollout hit the token limit before finishing.
    #[serde(default)]
    pub overlong: bool,
}

impl ChainedRollout {
    pub fn records(&self) -> impl Iterator<Item = &TokenRecord> {
        self.segments.iter().flat_map(|s| s.records.iter())
    }

    pub fn total_tokens(&self) -> usize {
        self.segments.iter().map(|s| s.records.len()).sum()
    }

    pub fn check_links(&self) -> Result<(), RolloutError> {
        if self.segments.is_empty() && self.summaries.is_empty() {
            return Ok(());
        }
        if self.summaries.len() + 1 != self.segments.len() {
            return Err(RolloutError::SummaryCount {
                segments: self.segments.len(),
                summaries: self.summaries.len(),
            });
        }
        for (i, summary) in self.summaries.iter().enumerate() {
            if !self.segments[i + 1].prompt_tokens.starts_with(summary) {
                return Err(RolloutError::BrokenLink { segment: i + 1 });
            }
        }
        Ok(())
    }

    /// First-segment prompt, identifying which prompt the rollout answers.
    pub fn root_prompt(&self) -> Option<&[u32]> {
        self.segments.first().map(|s| s.prompt_tokens.as_slice())
    }
}

/// 128-bit random prompt identifier, serialized as 32 hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PromptId(pub u128);

impl PromptId {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        PromptId(rng.gen())
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl FromStr for PromptId {
    type Err = std::num::ParseIntError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u128::from_str_radix(s, 16).map(PromptId)
    }
}

impl Serialize for PromptId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PromptId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub prompt_id: PromptId,
    pub rollouts: Vec<ChainedRollout>,
    pub rewards: Vec<f64>,
    pub advantages: Option<Vec<f64>>,
    pub policy_versions: BTreeSet<u64>,
}

impl Group {
    /// Oldest policy version that produced any token in the group.
    pub fn min_version(&self) -> Option<u64> {
        self.policy_versions.iter().next().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostFeatures {
    pub thinking_tokens: u64,
    pub tool_call_tokens: u64,
    pub tool_output_tokens: u64,
    pub final_message_tokens: u64,
    pub tool_call_count: u64,
    pub turn_count: u64,
}

impl CostFeatures {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.thinking_tokens as f64,
            self.tool_call_tokens as f64,
            self.tool_output_tokens as f64,
            self.final_message_tokens as f64,
            self.tool_call_count as f64,
            self.turn_count as f64,
        ]
    }
}

impl std::ops::Add for CostFeatures {
    type Output = CostFeatures;
    fn add(self, o: CostFeatures) -> CostFeatures {
        CostFeatures {
            thinking_tokens: self.thinking_tokens + o.thinking_tokens,
            tool_call_tokens: self.tool_call_tokens + o.tool_call_tokens,
            tool_output_tokens: self.tool_output_tokens + o.tool_output_tokens,
            final_message_tokens: self.final_message_tokens + o.final_message_tokens,
            tool_call_count: self.tool_call_count + o.tool_call_count,
            turn_count: self.turn_count + o.turn_count,
        }
    }
}

/// Where summary tokens are counted in [`CostFeatures`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryAccounting {
    #[default]
    FinalMessage,
    Thinking,
    Ignore,
}

pub fn segment_cost_features(s: &Segment, summaries: SummaryAccounting) -> CostFeatures {
    let mut f = CostFeatures {
        tool_call_count: s.tool_calls as u64,
        turn_count: s.turns as u64,
        ..Default::default()
    };
    for r in &s.records {
        match r.category {
            TokenCategory::Thinking => f.thinking_tokens += 1,
            TokenCategory::ToolCall => f.tool_call_tokens += 1,
            TokenCategory::ToolOutput => f.tool_output_tokens += 1,
            TokenCategory::FinalMessage => f.final_message_tokens += 1,
            TokenCategory::Summary => match summaries {
                SummaryAccounting::FinalMessage => f.final_message_tokens += 1,
                SummaryAccounting::Thinking => f.thinking_tokens += 1,
                SummaryAccounting::Ignore => {}
            },
        }
    }
    f
}

/// Per-category token counts, tool calls and turns summed over all segments.
pub fn rollout_cost_features(r: &ChainedRollout, summaries: SummaryAccounting) -> Result<CostFeatures, RolloutError> {
    if !(r.segments.is_empty() && r.summaries.is_empty()) && r.summaries.len() + 1 != r.segments.len() {
        return Err(RolloutError::SummaryCount {
            segments: r.segments.len(),
            summaries: r.summaries.len(),
        });
    }
    Ok(r.segments
        .iter()
        .map(|s| segment_cost_features(s, summaries))
        .fold(CostFeatures::default(), |a, b| a + b))
}

/// Segments of a chain in order, after verifying every summary link.
pub fn flatten_chain(r: &ChainedRollout) -> Result<Vec<Segment>, RolloutError> {
    r.check_links()?;
    Ok(r.segments.clone())
}

/// Inverse of [`flatten_chain`]: rebuilds the chain, taking each link from
/// the trailing summary tokens of the preceding segment.
pub fn relink_chain(segments: Vec<Segment>) -> Result<ChainedRollout, RolloutError> {
    let summaries = segments
        .iter()
        .take(segments.len().saturating_sub(1))
        .map(Segment::trailing_summary)
        .collect();
    let chain = ChainedRollout {
        segments,
        summaries,
        ..Default::default()
    };
    chain.check_links()?;
    Ok(chain)
}

pub fn validate_group(g: &Group, group_size: usize) -> Result<(), RolloutError> {
    if g.rollouts.len() != group_size {
        return Err(RolloutError::GroupSize {
            got: g.rollouts.len(),
            expected: group_size,
        });
    }
    let mut roots = g.rollouts.iter().filter_map(|r| r.root_prompt());
    if let Some(first) = roots.next() {
        if roots.any(|p| p != first) {
            return Err(RolloutError::MixedPrompts);
        }
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::vocab::*;
    use proptest::prelude::*;
    use TokenCategory::*;

    #[test]
    fn empty_rollout_has_zero_features() {
        let f = rollout_cost_features(&ChainedRollout::default(), SummaryAccounting::default()).unwrap();
        assert_eq!(f, CostFeatures::default());
    }

    #[test]
    fn single_segment_direct_count() {
        let s = Segment {
            prompt_tokens: vec![BOS, 20],
            records: vec![
                rec(THINK, Thinking, 0),
                rec(THINK, Thinking, 0),
                rec(THINK, Thinking, 0),
                rec(LOOKUP, ToolCall, 0),
                rec(20, ToolCall, 0),
            ],
            tool_calls: 1,
            turns: 1,
            router_traces: vec![],
        };
        let r = ChainedRollout {
            segments: vec![s],
            ..Default::default()
        };
        let f = rollout_cost_features(&r, SummaryAccounting::default()).unwrap();
        assert_eq!(f.as_array(), [3.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn mismatched_summaries_rejected() {
        let mut r = three_segment_chain();
        r.summaries.pop();
        assert!(matches!(
            rollout_cost_features(&r, SummaryAccounting::default()),
            Err(RolloutError::SummaryCount { .. })
        ));
        assert!(flatten_chain(&r).is_err());
    }

    #[test]
    fn three_segment_flatten_keeps_links() {
        let r = three_segment_chain();
        let segs = flatten_chain(&r).unwrap();
        assert_eq!(segs.len(), 3);
        for (i, s) in segs.iter().enumerate().skip(1) {
            assert!(s.prompt_tokens.starts_with(&r.summaries[i - 1]));
        }
        let trainable: usize = segs.iter().map(Segment::trainable_tokens).sum();
        assert_eq!(trainable, r.records().filter(|x| x.is_trainable()).count());
    }

    #[test]
    fn broken_link_detected() {
        let mut r = three_segment_chain();
        r.segments[2].prompt_tokens = vec![BOS, 30];
        assert_eq!(flatten_chain(&r), Err(RolloutError::BrokenLink { segment: 2 }));
    }

    #[test]
    fn single_segment_flatten_is_identity() {
        let mut r = three_segment_chain();
        r.segments.truncate(1);
        r.summaries.clear();
        assert_eq!(flatten_chain(&r).unwrap(), r.segments);
    }

    #[test]
    fn group_validation() {
        let r = three_segment_chain();
        let mut g = Group {
            prompt_id: PromptId(7),
            rollouts: vec![r.clone(); 4],
            rewards: vec![0.0; 4],
            advantages: None,
            policy_versions: BTreeSet::new(),
        };
        assert!(validate_group(&g, 4).is_ok());
        g.rollouts.pop();
        assert!(matches!(validate_group(&g, 4), Err(RolloutError::GroupSize { .. })));
        let mut other = r.clone();
        other.segments[0].prompt_tokens = vec![BOS, 40];
        g.rollouts.push(other);
        assert_eq!(validate_group(&g, 4), Err(RolloutError::MixedPrompts));
    }

    #[test]
    fn prompt_id_round_trips_as_hex() {
        let id = PromptId(0x0123_4567_89ab_cdef_0011_2233_4455_6677);
        let s = serde_json::to_string(&id).unwrap();
        assert_eq!(s, "\"0123456789abcdef0011223344556677\"");
        assert_eq!(serde_json::from_str::<PromptId>(&s).unwrap(), id);
    }

    fn arb_category() -> impl Strategy<Value = TokenCategory> {
        prop_oneof![
            Just(Thinking),
            Just(ToolCall),
            Just(ToolOutput),
            Just(FinalMessage),
            Just(Summary)
        ]
    }

    fn arb_chain() -> impl Strategy<Value = ChainedRollout> {
        prop::collection::vec(
            (
                prop::collection::vec((0u32..64, arb_category()), 0..30),
                0u32..5,
                0u32..5,
            ),
            1..5,
        )
        .prop_map(|segs| {
            let mut out: Vec<Segment> = Vec::new();
            for (i, (recs, tc, turns)) in segs.into_iter().enumerate() {
                let mut records: Vec<TokenRecord> = recs.into_iter().map(|(t, c)| rec(t, c, i as u64)).collect();
                // strip trailing summary tokens, then append a link where needed
                while records.last().is_some_and(|r| r.category == Summary) {
                    records.pop();
                }
                let mut prompt = vec![BOS, 20];
                if let Some(prev) = out.last() {
                    prompt = prev.trailing_summary();
                    prompt.push(RESUME);
                }
                out.push(Segment {
                    prompt_tokens: prompt,
                    records,
                    tool_calls: tc,
                    turns,
                    router_traces: vec![],
                });
                let last = out.last_mut().unwrap();
                last.records.push(rec(SUMMARIZE, Summary, i as u64));
                last.records.push(rec(20 + i as u32, Summary, i as u64));
            }
            // final segment does not end with a link
            let last = out.last_mut().unwrap();
            last.records.truncate(last.records.len() - 2);
            last.records.push(rec(EOS, FinalMessage, 9));
            relink_chain(out).unwrap()
        })
    }

    /// Independent recount: one pass over a flat token list.
    fn recount(r: &ChainedRollout) -> [u64; 6] {
        let mut c = [0u64; 6];
        for seg in &r.segments {
            c[4] += seg.tool_calls as u64;
            c[5] += seg.turns as u64;
        }
        for x in r.records() {
            let idx = match x.category {
                Thinking => 0,
                ToolCall => 1,
                ToolOutput => 2,
                FinalMessage | Summary => 3,
            };
            c[idx] += 1;
        }
        c
    }

    proptest! {
        #[test]
        fn features_match_recount(r in arb_chain()) {
            let f = rollout_cost_features(&r, SummaryAccounting::FinalMessage).unwrap();
            let c = recount(&r);
            prop_assert_eq!(
                [f.thinking_tokens, f.tool_call_tokens, f.tool_output_tokens,
                 f.final_message_tokens, f.tool_call_count, f.turn_count],
                c
            );
        }

        #[test]
        fn features_additive_over_segments(r in arb_chain()) {
            let total = rollout_cost_features(&r, SummaryAccounting::FinalMessage).unwrap();
            let summed = r.segments.iter()
                .map(|s| segment_cost_features(s, SummaryAccounting::FinalMessage))
                .fold(CostFeatures::default(), |a, b| a + b);
            prop_assert_eq!(total, summed);
        }

        #[test]
        fn flatten_relink_round_trip(r in arb_chain()) {
            let back = relink_chain(flatten_chain(&r).unwrap()).unwrap();
            prop_assert_eq!(back, r);
        }

        #[test]
        fn jsonl_round_trip(r in arb_chain()) {
            let line = serde_json::to_string(&r).unwrap();
            prop_assert!(!line.contains('\n'));
            let back: ChainedRollout = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
