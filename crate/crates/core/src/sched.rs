//! Context-parallel zigzag chunking and attention-cost-aware packing of
//! whole sequences onto data-parallel ranks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SchedError {
    #[error("sequence of {length} tokens exceeds the per-rank budget of {budget}")]
    Infeasible { length: u64, budget: u64 },
    #[error("no rank has room for a sequence of {length} tokens")]
    Capacity { length: u64 },
    #[error("need at least one rank")]
    NoRanks,
}

/// Rank `i` of `cp` processes chunks `i` and `2·cp − 1 − i`, so every rank
/// gets one early (cheap) and one late (expensive) causal chunk.
pub fn zigzag_assign(cp: usize) -> Vec<(usize, usize)> {
    (0..cp).map(|i| (i, 2 * cp - 1 - i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub alpha: f64,
    pub beta: f64,
}

impl CostModel {
    /// Linear weight 1 and a quadratic weight chosen so a `max_len` sequence
    /// costs `ratio` times a half-length one (`ratio` in (2, 4)).
    pub fn calibrated(max_len: u64, ratio: f64) -> Self {
        assert!(ratio > 2.0 && ratio < 4.0 && max_len > 0);
        let alpha = 1.0;
        CostModel {
            alpha,
            beta: alpha * (ratio / 2.0 - 1.0) / (max_len as f64 * (1.0 - ratio / 4.0)),
        }
    }
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel::calibrated(64, 3.9)
    }
}

pub fn attention_cost(length: u64, m: &CostModel) -> f64 {
    let l = length as f64;
    m.alpha * l + m.beta * l * l
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackingPlan {
    /// Rank of each input sequence.
    pub assignment: Vec<usize>,
    pub loads: Vec<f64>,
    pub tokens: Vec<u64>,
}

impl PackingPlan {
    pub fn max_load(&self) -> f64 {
        self.loads.iter().copied().fold(0.0, f64::max)
    }

    /// Max load over mean load (1 = perfectly balanced).
    pub fn imbalance(&self) -> f64 {
        let mean = self.loads.iter().sum::<f64>() / self.loads.len() as f64;
        if mean == 0.0 {
            1.0
        } else {
            self.max_load() / mean
        }
    }
}

/// Longest-processing-time packing: sequences in descending cost order go to
/// the least-loaded rank with token room left (ties to the lower rank).
pub fn pack(lengths: &[u64], ranks: usize, m: &CostModel, token_budget: u64) -> Result<PackingPlan, SchedError> {
    if ranks == 0 {
        return Err(SchedError::NoRanks);
    }
    if let Some(&length) = lengths.iter().find(|&&l| l > token_budget) {
        return Err(SchedError::Infeasible {
            length,
            budget: token_budget,
        });
    }
    let costs: Vec<f64> = lengths.iter().map(|&l| attention_cost(l, m)).collect();
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    // canonical order, so the result does not depend on input order
    order.sort_by(|&a, &b| {
        costs[b]
            .total_cmp(&costs[a])
            .then(lengths[b].cmp(&lengths[a]))
            .then(a.cmp(&b))
    });
    let mut plan = PackingPlan {
        assignment: vec![0; lengths.len()],
        loads: vec![0.0; ranks],
        tokens: vec![0; ranks],
    };
    for i in order {
        let r = (0..ranks)
            .filter(|&r| plan.tokens[r] + lengths[i] <= token_budget)
            .min_by(|&a, &b| plan.loads[a].total_cmp(&plan.loads[b]).then(a.cmp(&b)))
            .ok_or(SchedError::Capacity { length: lengths[i] })?;
        plan.assignment[i] = r;
        plan.loads[r] += costs[i];
        plan.tokens[r] += lengths[i];
    }
    Ok(plan)
}
