use serde::{Deserialize, Serialize};

use super::RunError;
use crate::envsim::{FleetConfig, Resources};
use crate::exec::Exec;
use crate::reconciler::{CurriculumConfig, StalenessPolicy};
use crate::reward::PenaltyConfig;
use crate::rollout::SummaryAccounting;
use crate::sched::CostModel;
use crate::toylm::{KLRegConfig, ModelConfig};

/// Key-chain prompt pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    /// Training prompts; each is used at most once.
    pub prompts: usize,
    pub min_depth: usize,
    pub max_depth: usize,
    /// Tokens per context segment before self-summarization is forced.
    pub context_budget: usize,
    /// Records per rollout across all segments.
    pub max_tokens: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            prompts: 200,
            min_depth: 1,
            max_depth: 4,
            context_budget: 20,
            max_tokens: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Stop after this many optimizer steps; `None` runs until the pool drains.
    pub max_steps: Option<u64>,
    pub group_size: usize,
    pub groups_per_step: usize,
    pub max_attempts: u32,
    pub lr: f64,
    pub clip_eps: Option<f64>,
    pub mtp_coef: f64,
    /// Policy tokens each active rollout emits per simulated tick.
    pub tokens_per_tick: usize,
    pub snapshot_interval: u64,
    pub max_ticks: u64,
    pub exec: Exec,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            max_steps: None,
            group_size: 4,
            groups_per_step: 2,
            max_attempts: 3,
            lr: 0.01,
            clip_eps: Some(0.2),
            mtp_coef: 0.0,
            tokens_per_tick: 4,
            snapshot_interval: 25,
            max_ticks: 100_000,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub penalty: PenaltyConfig,
    pub summary_accounting: SummaryAccounting,
    pub behavior_rubrics: bool,
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection {
            penalty: PenaltyConfig::default(),
            summary_accounting: SummaryAccounting::default(),
            behavior_rubrics: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PackingSection {
    pub ranks: usize,
    pub token_budget: u64,
    pub cost: CostModel,
}

impl Default for PackingSection {
    fn default() -> Self {
        PackingSection {
            ranks: 2,
            token_budget: 8192,
            cost: CostModel::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetSection {
    pub cluster: FleetConfig,
    pub pod_request: Resources,
    /// Probability that a finished rollout is reported as a worker failure.
    pub failure_rate: f64,
}

impl Default for FleetSection {
    fn default() -> Self {
        FleetSection {
            cluster: FleetConfig::uniform(4, Resources::new(16.0, 64.0, 256.0)),
            pod_request: Resources::new(1.0, 2.0, 4.0),
            failure_rate: 0.0,
        }
    }
}

/// Held-out evaluation, run before the first and after the last step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub prompts: usize,
    pub samples: usize,
    pub best_of_k: usize,
    /// Also evaluate every this many steps; 0 disables.
    pub every: u64,
    pub temperature: f32,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            prompts: 64,
            samples: 8,
            best_of_k: 8,
            every: 0,
            temperature: 1.0,
        }
    }
}

/// Acceptance thresholds checked by the report.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Final held-out mean and best-of-k must beat the initial ones.
    pub require_improvement: bool,
    pub min_final_mean: Option<f64>,
    pub min_final_best_of_k: Option<f64>,
    pub max_staleness: Option<u64>,
    pub min_summarized_nonzero_adv: Option<u64>,
}

impl Thresholds {
    /// Checks for the default desk run: held-out improvement and at least
    /// one trained summarized rollout with nonzero advantage.
    pub fn desk() -> Self {
        Thresholds {
            require_improvement: true,
            min_summarized_nonzero_adv: Some(1),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub reward: RewardSection,
    pub klreg: KLRegConfig,
    pub staleness: StalenessPolicy,
    pub packing: PackingSection,
    pub fleet: FleetSection,
    /// `None` draws prompts uniformly.
    pub curriculum: Option<CurriculumConfig>,
    pub eval: EvalSection,
    pub thresholds: Thresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            task: TaskSection::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            reward: RewardSection::default(),
            klreg: KLRegConfig::default(),
            staleness: StalenessPolicy::default(),
            packing: PackingSection::default(),
            fleet: FleetSection::default(),
            curriculum: Some(CurriculumConfig::default()),
            eval: EvalSection::default(),
            thresholds: Thresholds::desk(),
        }
    }
}

fn bad(msg: impl Into<String>) -> RunError {
    RunError::Config(msg.into())
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self, RunError> {
        let c: RunConfig = serde_json::from_str(s).map_err(|e| bad(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Small run for CI: 50 depth-2 prompts.
    pub fn smoke() -> Self {
        RunConfig {
            task: TaskSection {
                prompts: 50,
                min_depth: 2,
                max_depth: 2,
                ..Default::default()
            },
            eval: EvalSection {
                prompts: 16,
                samples: 8,
                ..Default::default()
            },
            thresholds: Thresholds::default(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let t = &self.task;
        if t.min_depth < 1 || t.min_depth > t.max_depth {
            return Err(bad("need 1 ≤ min_depth ≤ max_depth"));
        }
        if t.max_depth + 1 > crate::vocab::key_count() {
            return Err(bad(format!("max_depth must be below {}", crate::vocab::key_count())));
        }
        // a fresh segment must fit the prompt, one full tool call and a summary
        if t.context_budget < 8 {
            return Err(bad("context_budget must be at least 8"));
        }
        if t.max_tokens == 0 {
            return Err(bad("max_tokens must be positive"));
        }
        self.model.validate().map_err(|e| bad(e.to_string()))?;
        if self.model.vocab != crate::vocab::VOCAB_SIZE {
            return Err(bad(format!("model.vocab must be {}", crate::vocab::VOCAB_SIZE)));
        }
        let tr = &self.train;
        if tr.group_size < 2 {
            return Err(bad("group_size must be at least 2"));
        }
        if tr.groups_per_step == 0 || tr.tokens_per_tick == 0 || tr.max_attempts == 0 {
            return Err(bad(
                "groups_per_step, tokens_per_tick and max_attempts must be positive",
            ));
        }
        if !(tr.lr > 0.0 && tr.lr.is_finite()) {
            return Err(bad("lr must be positive"));
        }
        if tr.clip_eps.is_some_and(|e| !(e > 0.0 && e < 1.0)) {
            return Err(bad("clip_eps must lie in (0, 1)"));
        }
        if tr.snapshot_interval == 0 {
            return Err(bad("snapshot_interval must be positive"));
        }
        self.reward.penalty.validate().map_err(|e| bad(e.to_string()))?;
        if self.klreg.beta < 0.0 {
            return Err(bad("klreg.beta must be ≥ 0"));
        }
        // 0 and 1 both name the initial weights
        if self.klreg.reference_version > 1 {
            return Err(bad("klreg.reference_version must be the initial weights (0 or 1)"));
        }
        self.staleness.validate().map_err(|e| bad(e.to_string()))?;
        if self.staleness.max_inflight < tr.group_size {
            return Err(bad("staleness.max_inflight must hold at least one group"));
        }
        if self.packing.ranks == 0 {
            return Err(bad("packing.ranks must be positive"));
        }
        self.fleet.cluster.validate().map_err(|e| bad(e.to_string()))?;
        if !(0.0..1.0).contains(&self.fleet.failure_rate) {
            return Err(bad("fleet.failure_rate must lie in [0, 1)"));
        }
        let e = &self.eval;
        if e.prompts > 0 && (e.best_of_k == 0 || e.best_of_k > e.samples) {
            return Err(bad("eval needs 1 ≤ best_of_k ≤ samples"));
        }
        if !(e.temperature > 0.0) {
            return Err(bad("eval.temperature must be positive"));
        }
        Ok(())
    }
}
