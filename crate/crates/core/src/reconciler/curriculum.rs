//! Difficulty-aware sampling weights: buckets whose completed groups needed
//! more turns (or thinking tokens) are drawn more often.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumSignal {
    #[default]
    Turns,
    ThinkingTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    pub signal: CurriculumSignal,
    /// Weight ∝ (mean signal)^exponent.
    pub exponent: f64,
    /// Lower bound on any bucket's mean signal, keeping weights positive.
    pub floor: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            signal: CurriculumSignal::Turns,
            exponent: 1.0,
            floor: 0.5,
        }
    }
}

/// Summary of one completed group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub bucket: usize,
    pub mean_turns: f64,
    pub mean_thinking_tokens: f64,
}

/// Normalized weight per difficulty bucket. Uniform with no history; buckets
/// not yet observed get the largest observed mean, so they keep being tried.
pub fn curriculum_weights(history: &[GroupStats], buckets: usize, cfg: &CurriculumConfig) -> Vec<f64> {
    if buckets == 0 {
        return Vec::new();
    }
    let mut sum = vec![0.0; buckets];
    let mut count = vec![0usize; buckets];
    for g in history.iter().filter(|g| g.bucket < buckets) {
        sum[g.bucket] += match cfg.signal {
            CurriculumSignal::Turns => g.mean_turns,
            CurriculumSignal::ThinkingTokens => g.mean_thinking_tokens,
        };
        count[g.bucket] += 1;
    }
    let means: Vec<Option<f64>> = (0..buckets)
        .map(|b| (count[b] > 0).then(|| (sum[b] / count[b] as f64).max(cfg.floor).max(f64::MIN_POSITIVE)))
        .collect();
    let Some(fallback) = means.iter().flatten().copied().reduce(f64::max) else {
        return vec![1.0 / buckets as f64; buckets];
    };
    let raw: Vec<f64> = means.iter().map(|m| m.unwrap_or(fallback).powf(cfg.exponent)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}
