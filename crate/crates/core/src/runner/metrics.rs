use serde::{Deserialize, Serialize};

use super::{RunError, Thresholds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    /// One optimizer step.
    Train,
    /// Held-out evaluation of the weights at `version`.
    Eval,
}

/// One CSV row. Train-only fields are empty on eval rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub kind: RowKind,
    pub step: u64,
    pub version: u64,
    pub groups: usize,
    pub rollouts: usize,
    pub mean_reward: f64,
    pub k: usize,
    pub best_of_k: f64,
    pub mean_tokens: f64,
    pub clip_fraction: Option<f64>,
    pub kl_estimate: Option<f64>,
    pub policy_loss: Option<f64>,
    pub mean_ratio: Option<f64>,
    /// Token staleness: trainer version minus sampling version.
    pub staleness_mean: Option<f64>,
    pub staleness_max: Option<u64>,
    pub stale_0: Option<u64>,
    pub stale_1: Option<u64>,
    pub stale_2: Option<u64>,
    pub stale_3plus: Option<u64>,
    /// Per-rollout lag behind the trainer of the first and the last token.
    pub start_lag_mean: Option<f64>,
    pub completion_lag_mean: Option<f64>,
    pub pack_imbalance: Option<f64>,
    /// Trained rollouts spanning ≥ 2 segments with nonzero advantage.
    pub summarized_nonzero_adv: Option<u64>,
    pub discarded: Option<usize>,
}

fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Mean over prompts of the expected maximum reward among `k` distinct
/// rollouts drawn uniformly from the prompt's `G`. With rewards sorted
/// ascending, the `i`-th (1-based) is the maximum in `C(i−1, k−1)` of the
/// `C(G, k)` subsets.
pub fn best_of_k(rewards: &[Vec<f64>], k: usize) -> Result<f64, RunError> {
    if rewards.is_empty() {
        return Err(RunError::Metrics("best_of_k needs at least one prompt".into()));
    }
    let mut total = 0.0;
    for row in rewards {
        let g = row.len();
        if k == 0 || k > g {
            return Err(RunError::Metrics(format!(
                "best_of_k needs 1 ≤ k ≤ G, got k={k}, G={g}"
            )));
        }
        let mut s = row.clone();
        s.sort_by(f64::total_cmp);
        let denom = binom(g, k);
        total += s
            .iter()
            .enumerate()
            .skip(k - 1)
            .map(|(i, r)| r * binom(i, k - 1) / denom)
            .sum::<f64>();
    }
    Ok(total / rewards.len() as f64)
}

pub fn write_csv(rows: &[MetricsRow]) -> Result<Vec<u8>, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| RunError::Metrics(e.to_string()))?;
    }
    w.into_inner().map_err(|e| RunError::Metrics(e.to_string()))
}

pub fn read_csv(bytes: &[u8]) -> Result<Vec<MetricsRow>, RunError> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| RunError::Metrics(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportSummary {
    pub train_steps: u64,
    pub final_version: u64,
    pub trained_groups: usize,
    pub discarded_groups: usize,
    pub mean_train_reward_first: Option<f64>,
    pub mean_train_reward_last: Option<f64>,
    pub eval_k: Option<usize>,
    pub eval_mean_initial: Option<f64>,
    pub eval_mean_final: Option<f64>,
    pub eval_best_of_k_initial: Option<f64>,
    pub eval_best_of_k_final: Option<f64>,
    pub mean_clip_fraction: Option<f64>,
    pub mean_kl_estimate: Option<f64>,
    pub max_staleness: Option<u64>,
    pub mean_pack_imbalance: Option<f64>,
    pub summarized_nonzero_adv: u64,
    /// Names of failed thresholds; empty means pass.
    pub failures: Vec<String>,
}

impl ReportSummary {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Aggregates metrics rows and checks them against `thresholds`. An empty
/// file always fails.
pub fn emit_report(rows: &[MetricsRow], thresholds: &Thresholds) -> ReportSummary {
    let train: Vec<&MetricsRow> = rows.iter().filter(|r| r.kind == RowKind::Train).collect();
    let eval: Vec<&MetricsRow> = rows.iter().filter(|r| r.kind == RowKind::Eval).collect();
    let mut s = ReportSummary {
        train_steps: train.len() as u64,
        final_version: rows.iter().map(|r| r.version).max().unwrap_or(0),
        trained_groups: train.iter().map(|r| r.groups).sum(),
        discarded_groups: train.iter().filter_map(|r| r.discarded).sum(),
        mean_train_reward_first: train.first().map(|r| r.mean_reward),
        mean_train_reward_last: train.last().map(|r| r.mean_reward),
        eval_k: eval.first().map(|r| r.k),
        eval_mean_initial: eval.first().map(|r| r.mean_reward),
        eval_mean_final: eval.last().map(|r| r.mean_reward),
        eval_best_of_k_initial: eval.first().map(|r| r.best_of_k),
        eval_best_of_k_final: eval.last().map(|r| r.best_of_k),
        mean_clip_fraction: mean(train.iter().filter_map(|r| r.clip_fraction)),
        mean_kl_estimate: mean(train.iter().filter_map(|r| r.kl_estimate)),
        max_staleness: train.iter().filter_map(|r| r.staleness_max).max(),
        mean_pack_imbalance: mean(train.iter().filter_map(|r| r.pack_imbalance)),
        summarized_nonzero_adv: train.iter().filter_map(|r| r.summarized_nonzero_adv).sum(),
        failures: Vec::new(),
    };
    let f = &mut s.failures;
    if rows.is_empty() {
        f.push("no metrics rows".into());
    }
    let values = rows.iter().flat_map(|r| [r.mean_reward, r.best_of_k, r.mean_tokens]);
    if values.into_iter().any(|v| !v.is_finite()) {
        f.push("non-finite metric".into());
    }
    if thresholds.require_improvement {
        match (s.eval_mean_initial, s.eval_mean_final) {
            (Some(a), Some(b)) if eval.len() >= 2 && b > a => {}
            _ => f.push("eval_mean_improvement".into()),
        }
        match (s.eval_best_of_k_initial, s.eval_best_of_k_final) {
            (Some(a), Some(b)) if eval.len() >= 2 && b > a => {}
            _ => f.push("eval_best_of_k_improvement".into()),
        }
    }
    if let Some(min) = thresholds.min_final_mean {
        if !s.eval_mean_final.is_some_and(|v| v >= min) {
            f.push("min_final_mean".into());
        }
    }
    if let Some(min) = thresholds.min_final_best_of_k {
        if !s.eval_best_of_k_final.is_some_and(|v| v >= min) {
            f.push("min_final_best_of_k".into());
        }
    }
    if let Some(max) = thresholds.max_staleness {
        if s.max_staleness.is_some_and(|v| v > max) {
            f.push("max_staleness".into());
        }
    }
    if let Some(min) = thresholds.min_summarized_nonzero_adv {
        if s.summarized_nonzero_adv < min {
            f.push("min_summarized_nonzero_adv".into());
        }
    }
    s
}
