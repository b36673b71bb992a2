//! End-to-end desk run: the reconciler schedules key-chain prompts onto
//! simulated sandbox pods, rollouts are sampled token by token against
//! hot-loaded weights, scored, grouped, packed across ranks and trained on,
//! and every new version is published through the delta-compressed store.
//!
//! The loop runs in lockstep ticks on one control thread; rollout stepping,
//! per-rank gradients and evaluation fan out through [`crate::exec`]. Each
//! piece of randomness has its own seeded stream, so a run is bitwise
//! reproducible for a given config regardless of thread count.

mod config;
mod metrics;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    EvalSection, FleetSection, PackingSection, RewardSection, RunConfig, TaskSection, Thresholds, TrainSection,
};
pub use metrics::{best_of_k, emit_report, read_csv, write_csv, MetricsRow, ReportSummary, RowKind};

use crate::envsim::{EnvError, Fleet, PodSpec, PodStatus, TaskState, WhenFull};
use crate::exec::{for_each_mut, map_range, Exec};
use crate::reconciler::{
    curriculum_weights, AuditLog, AuditRecord, CheckpointLog, Coordinator, CoordinatorConfig, Decision,
    GroupCheckpoint, GroupStats, ReconcilerError, Terminal,
};
use crate::reward::{
    assign_chain_advantage, composite_reward, default_rubrics, group_advantages, score_behaviors, RewardError,
};
use crate::rollout::{rollout_cost_features, ChainedRollout, Group, PromptId, RolloutError, TokenCategory};
use crate::sched::{self, SchedError};
use crate::sync::{BlobStore, HotloadEngine, LocalDirStore, MemStore, Publisher, SyncError};
use crate::toylm::{
    loss_and_grad, sample, Adam, LossConfig, LossMetrics, RolloutGenerator, SampleConfig, StaticFeed, StepStatus,
    ToyLmError, ToyMoEParams, TrainingSequence,
};
use crate::vocab::Grammar;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    ToyLm(#[from] ToyLmError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Reconciler(#[from] ReconcilerError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Sched(#[from] SchedError),
}

fn io(e: impl std::fmt::Display) -> RunError {
    RunError::Io(e.to_string())
}

const STREAM_MODEL: u64 = 1;
const STREAM_ROLLOUT: u64 = 2;
const STREAM_EVAL_TASKS: u64 = 3;
const STREAM_EVAL_SAMPLES: u64 = 4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for item `index` of `stream`.
fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(stream ^ splitmix(index)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub rows: Vec<MetricsRow>,
    pub audit: Vec<AuditRecord>,
    pub steps: u64,
    pub final_version: u64,
    pub ticks: u64,
    /// Every training prompt reached a terminal state.
    pub drained: bool,
    pub requeues: u64,
    pub worker_failures: u64,
    pub hotloads: u64,
    /// Largest trainer-minus-sampling version among trained tokens.
    pub max_staleness: u64,
    pub summarized_nonzero_adv: u64,
    pub seconds: f64,
}

impl RunResult {
    pub fn eval_rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(|r| r.kind == RowKind::Eval)
    }

    pub fn train_rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(|r| r.kind == RowKind::Train)
    }
}

struct Active {
    prompt_id: PromptId,
    pod: u64,
    gen: RolloutGenerator,
    error: Option<String>,
}

/// Held-out tasks; the same seeds are used at every evaluation so successive
/// evaluations differ only through the weights.
fn eval_tasks(cfg: &RunConfig) -> Vec<TaskState> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, STREAM_EVAL_TASKS, 0));
    (0..cfg.eval.prompts)
        .map(|_| {
            let depth = rng.gen_range(cfg.task.min_depth..=cfg.task.max_depth);
            TaskState::random(depth, &mut rng)
        })
        .collect()
}

/// Samples `eval.samples` rollouts per held-out task and scores the task
/// reward only.
pub fn evaluate(
    cfg: &RunConfig,
    tasks: &[TaskState],
    version: u64,
    params: Arc<ToyMoEParams<f32>>,
    step: u64,
) -> Result<MetricsRow, RunError> {
    let e = &cfg.eval;
    let scfg = SampleConfig {
        grammar: Grammar {
            context_budget: cfg.task.context_budget,
        },
        max_tokens: cfg.task.max_tokens,
        temperature: e.temperature,
    };
    let n = tasks.len() * e.samples;
    let results = map_range(cfg.train.exec, n, |i| {
        let mut task = tasks[i / e.samples].clone();
        let mut feed = StaticFeed {
            version,
            params: params.clone(),
        };
        let seed = mix(cfg.seed, STREAM_EVAL_SAMPLES, i as u64);
        sample(&mut feed, task.prompt(), &mut task, scfg, seed).map(|r| (task.task_reward(), r.total_tokens()))
    });
    let results: Vec<(f64, usize)> = results.into_iter().collect::<Result<_, _>>()?;
    let matrix: Vec<Vec<f64>> = results
        .chunks(e.samples)
        .map(|c| c.iter().map(|x| x.0).collect())
        .collect();
    let mean_reward = results.iter().map(|x| x.0).sum::<f64>() / n as f64;
    let mean_tokens = results.iter().map(|x| x.1 as f64).sum::<f64>() / n as f64;
    Ok(MetricsRow {
        kind: RowKind::Eval,
        step,
        version,
        groups: tasks.len(),
        rollouts: n,
        mean_reward,
        k: e.best_of_k,
        best_of_k: best_of_k(&matrix, e.best_of_k)?,
        mean_tokens,
        clip_fraction: None,
        kl_estimate: None,
        policy_loss: None,
        mean_ratio: None,
        staleness_mean: None,
        staleness_max: None,
        stale_0: None,
        stale_1: None,
        stale_2: None,
        stale_3plus: None,
        start_lag_mean: None,
        completion_lag_mean: None,
        pack_imbalance: None,
        summarized_nonzero_adv: None,
        discarded: None,
    })
}

/// Allowed-token set at every record, as the constrained sampler saw it.
/// Tool output is not sampled and gets its own token as a singleton.
pub fn allowed_sets(grammar: &Grammar, seq: &TrainingSequence) -> Vec<Vec<u32>> {
    (0..seq.num_targets())
        .map(|i| {
            let at = seq.target_start + i;
            let target = seq.tokens[at];
            let a = grammar.allowed_next(&seq.tokens[..at]);
            if a.contains(&target) {
                a
            } else {
                vec![target]
            }
        })
        .collect()
}

/// Training-side state owned by the control loop.
struct Trainer<'a> {
    cfg: &'a RunConfig,
    grammar: Grammar,
    master: ToyMoEParams<f64>,
    reference: Option<ToyMoEParams<f64>>,
    adam: Adam,
    publisher: Publisher,
    version: u64,
    step: u64,
    max_staleness: u64,
    summarized: u64,
}

impl Trainer<'_> {
    fn loss_config(&self) -> LossConfig {
        LossConfig {
            kl: self.cfg.klreg,
            clip_eps: self.cfg.train.clip_eps,
            mtp_coef: self.cfg.train.mtp_coef,
        }
    }

    /// One optimizer step over already-packed groups. Returns its metrics row.
    fn train(&mut self, groups: &[Group], discarded: usize) -> Result<MetricsRow, RunError> {
        let mut seqs = Vec::new();
        let mut hist = [0u64; 4];
        let (mut stale_sum, mut stale_n, mut stale_max) = (0u64, 0u64, 0u64);
        let (mut start_lag, mut completion_lag) = (0u64, 0u64);
        let mut summarized = 0u64;
        let mut tokens = 0usize;
        let mut rollouts = 0usize;
        let mut rewards = Vec::with_capacity(groups.len());
        for g in groups {
            let adv = g.advantages.as_ref().expect("ready groups carry advantages");
            rewards.push(g.rewards.clone());
            for (r, &a) in g.rollouts.iter().zip(adv) {
                rollouts += 1;
                tokens += r.total_tokens();
                let masked = r.final_reward.as_ref().is_some_and(|b| b.zero_loss_weight);
                if r.segments.len() >= 2 && a != 0.0 && !masked {
                    summarized += 1;
                }
                let versions = r
                    .records()
                    .filter(|t| t.category != TokenCategory::ToolOutput)
                    .map(|t| t.policy_version);
                let (lo, hi) = versions.fold((u64::MAX, 0), |(lo, hi), v| (lo.min(v), hi.max(v)));
                if hi > 0 {
                    start_lag += self.version.saturating_sub(lo);
                    completion_lag += self.version.saturating_sub(hi);
                }
                for t in r.records().filter(|t| t.category != TokenCategory::ToolOutput) {
                    let lag = self.version.saturating_sub(t.policy_version);
                    hist[(lag as usize).min(3)] += 1;
                    stale_sum += lag;
                    stale_n += 1;
                    stale_max = stale_max.max(lag);
                }
                for mut s in assign_chain_advantage(r, a)? {
                    s.allowed = Some(allowed_sets(&self.grammar, &s));
                    seqs.push(s);
                }
            }
        }
        let p = &self.cfg.packing;
        let lengths: Vec<u64> = seqs.iter().map(|s| s.tokens.len() as u64).collect();
        let plan = sched::pack(&lengths, p.ranks, &p.cost, p.token_budget)?;
        let mut per_rank: Vec<Vec<TrainingSequence>> = vec![Vec::new(); p.ranks];
        for (s, &r) in seqs.into_iter().zip(&plan.assignment) {
            per_rank[r].push(s);
        }
        let total = per_rank.iter().map(Vec::len).sum::<usize>() as f64;
        let lc = self.loss_config();
        let (master, reference) = (&self.master, self.reference.as_ref());
        let results = map_range(self.cfg.train.exec, p.ranks, |r| {
            let batch = &per_rank[r];
            (!batch.is_empty()).then(|| loss_and_grad(master, batch, &lc, reference))
        });
        // each rank averages over its own sequences; reweight to the global mean
        let mut grads = ToyMoEParams::<f64>::zeros(self.cfg.model);
        let mut m = LossMetrics::default();
        let (mut ratio_w, mut clip_w, mut kl_w) = (0.0, 0.0, 0.0);
        for (r, res) in results.into_iter().enumerate() {
            let Some(res) = res else { continue };
            let (_, g, rm) = res?;
            let w = per_rank[r].len() as f64 / total;
            for (acc, t) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                for (a, v) in acc.data.iter_mut().zip(&t.data) {
                    *a += w * v;
                }
            }
            m.policy_loss += w * rm.policy_loss;
            m.kl_loss += w * rm.kl_loss;
            let n = rm.tokens as f64;
            ratio_w += n * rm.mean_ratio;
            clip_w += n * rm.clip_fraction;
            kl_w += n * rm.kl_estimate;
            m.tokens += rm.tokens;
        }
        if m.tokens > 0 {
            let n = m.tokens as f64;
            m.mean_ratio = ratio_w / n;
            m.clip_fraction = clip_w / n;
            m.kl_estimate = kl_w / n;
        }
        self.adam.step(&mut self.master, &grads);
        if !self.master.all_finite() {
            return Err(RunError::Metrics(format!(
                "non-finite weights after step {}",
                self.step + 1
            )));
        }
        self.version += 1;
        self.step += 1;
        self.max_staleness = self.max_staleness.max(stale_max);
        self.summarized += summarized;
        let k = self.cfg.eval.best_of_k.min(self.cfg.train.group_size);
        let mean_reward = rewards.iter().flatten().sum::<f64>() / rollouts as f64;
        Ok(MetricsRow {
            kind: RowKind::Train,
            step: self.step,
            version: self.version,
            groups: groups.len(),
            rollouts,
            mean_reward,
            k,
            best_of_k: best_of_k(&rewards, k)?,
            mean_tokens: tokens as f64 / rollouts as f64,
            clip_fraction: Some(m.clip_fraction),
            kl_estimate: Some(m.kl_estimate),
            policy_loss: Some(m.policy_loss),
            mean_ratio: Some(m.mean_ratio),
            staleness_mean: Some(if stale_n > 0 {
                stale_sum as f64 / stale_n as f64
            } else {
                0.0
            }),
            staleness_max: Some(stale_max),
            stale_0: Some(hist[0]),
            stale_1: Some(hist[1]),
            stale_2: Some(hist[2]),
            stale_3plus: Some(hist[3]),
            start_lag_mean: Some(start_lag as f64 / rollouts as f64),
            completion_lag_mean: Some(completion_lag as f64 / rollouts as f64),
            pack_imbalance: Some(plan.imbalance()),
            summarized_nonzero_adv: Some(summarized),
            discarded: Some(discarded),
        })
    }

    fn publish(&mut self) -> Result<(), RunError> {
        let shards = self.master.cast::<f32>().to_shards();
        self.publisher.publish(self.version, &shards, false)?;
        Ok(())
    }
}

/// Output locations of a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn audit(&self) -> PathBuf {
        self.root.join("audit.jsonl")
    }
    pub fn groups(&self) -> PathBuf {
        self.root.join("groups.jsonl")
    }
    pub fn fleet_audit(&self) -> PathBuf {
        self.root.join("fleet_audit.jsonl")
    }
}

/// Runs the full loop. With `out`, weights go to a directory store there and
/// metrics, summary, audit and checkpoint logs are written alongside;
/// otherwise everything stays in memory.
pub fn run_rl(cfg: &RunConfig, out: Option<&Path>) -> Result<RunResult, RunError> {
    cfg.validate()?;
    if cfg.fleet.cluster.when_full != WhenFull::Reject {
        return Err(RunError::Config(
            "the runner needs fleet.cluster.when_full = reject".into(),
        ));
    }
    let t0 = Instant::now();
    let exec: Exec = cfg.train.exec;
    let paths = out.map(|d| RunPaths { root: d.to_path_buf() });
    if let Some(p) = &paths {
        std::fs::create_dir_all(&p.root).map_err(io)?;
        let json = serde_json::to_vec_pretty(cfg).expect("config serializes");
        std::fs::write(p.config(), json).map_err(io)?;
    }
    let audit_log = paths.as_ref().map(|p| AuditLog::new(p.audit()));
    let ckpt_log = paths.as_ref().map(|p| CheckpointLog::new(p.groups()));

    // prompt pool, bucketed by depth
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let buckets = cfg.task.max_depth - cfg.task.min_depth + 1;
    let mut pool: Vec<VecDeque<PromptId>> = vec![VecDeque::new(); buckets];
    let mut tasks: BTreeMap<PromptId, (TaskState, usize)> = BTreeMap::new();
    let mut all_prompts = Vec::with_capacity(cfg.task.prompts);
    while all_prompts.len() < cfg.task.prompts {
        let depth = rng.gen_range(cfg.task.min_depth..=cfg.task.max_depth);
        let task = TaskState::random(depth, &mut rng);
        let id = PromptId::random(&mut rng);
        if tasks.contains_key(&id) {
            continue;
        }
        let b = depth - cfg.task.min_depth;
        tasks.insert(id, (task, b));
        pool[b].push_back(id);
        all_prompts.push(id);
    }
    let held_out = eval_tasks(cfg);

    let store: Arc<dyn BlobStore> = match &paths {
        Some(p) => Arc::new(LocalDirStore::new(&p.root)?),
        None => Arc::new(MemStore::new()),
    };
    let master = ToyMoEParams::<f64>::init(cfg.model, mix(cfg.seed, STREAM_MODEL, 0))?;
    let p32 = Arc::new(master.cast::<f32>());
    let mut publisher = Publisher::open(store.clone(), cfg.train.snapshot_interval, exec)?;
    // store versions start at 1; the initial weights are version 1
    publisher.publish(1, &p32.to_shards(), true)?;
    let mut engine = HotloadEngine::new(store.clone(), cfg.model, 1, p32.clone());
    let mut trainer = Trainer {
        cfg,
        grammar: Grammar {
            context_budget: cfg.task.context_budget,
        },
        reference: (cfg.klreg.beta > 0.0).then(|| master.clone()),
        master,
        adam: Adam::new(cfg.train.lr),
        publisher,
        version: 1,
        step: 0,
        max_staleness: 0,
        summarized: 0,
    };
    let mut coord = Coordinator::new(CoordinatorConfig {
        group_size: cfg.train.group_size,
        policy: cfg.staleness,
        max_attempts: cfg.train.max_attempts,
    })?;
    let mut fleet = Fleet::new(cfg.fleet.cluster.clone())?;
    let scfg = SampleConfig {
        grammar: trainer.grammar,
        max_tokens: cfg.task.max_tokens,
        temperature: 1.0,
    };
    let rubrics = if cfg.reward.behavior_rubrics {
        default_rubrics()
    } else {
        Vec::new()
    };

    let max_steps = cfg.train.max_steps.unwrap_or(u64::MAX);
    let mut rows = Vec::new();
    let do_eval = cfg.eval.prompts > 0 && max_steps > 0 && cfg.task.prompts > 0;
    if do_eval {
        rows.push(evaluate(cfg, &held_out, 1, p32, 0)?);
    }

    let mut active: BTreeMap<u64, Active> = BTreeMap::new();
    let mut scored: BTreeMap<u64, (PromptId, ChainedRollout)> = BTreeMap::new();
    let mut ready: VecDeque<Group> = VecDeque::new();
    let mut history: Vec<GroupStats> = Vec::new();
    let (mut requeues, mut failures, mut hotloads) = (0u64, 0u64, 0u64);
    let queue_target = cfg.staleness.max_inflight.div_ceil(cfg.train.group_size) + 1;
    let mut tick = 0u64;

    // drops every trace of an abandoned group and persists its terminal record
    let abandon = |prompt_id: PromptId,
                   coord: &Coordinator,
                   active: &mut BTreeMap<u64, Active>,
                   scored: &mut BTreeMap<u64, (PromptId, ChainedRollout)>,
                   fleet: &mut Fleet|
     -> Result<(), RunError> {
        let slots: Vec<u64> = active
            .iter()
            .filter(|(_, a)| a.prompt_id == prompt_id)
            .map(|(s, _)| *s)
            .collect();
        for s in slots {
            let a = active.remove(&s).expect("listed");
            fleet.terminate(a.pod)?;
        }
        scored.retain(|_, (p, _)| *p != prompt_id);
        if let Some(log) = &audit_log {
            let rec = coord
                .audit()
                .iter()
                .rev()
                .find(|r| r.prompt_id == prompt_id)
                .expect("abandoned groups are audited");
            log.append(rec)?;
        }
        Ok(())
    };

    while trainer.step < max_steps && tick < cfg.train.max_ticks {
        let pool_empty = pool.iter().all(VecDeque::is_empty);
        if pool_empty && coord.is_drained() && ready.is_empty() {
            break;
        }
        tick += 1;

        // keep the coordinator's queue topped up, sampling buckets by difficulty
        while coord.queued() < queue_target && pool.iter().any(|b| !b.is_empty()) {
            let mut w: Vec<f64> = match &cfg.curriculum {
                Some(c) => curriculum_weights(&history, buckets, c),
                None => pool.iter().map(|b| b.len() as f64).collect(),
            };
            for (wi, b) in w.iter_mut().zip(&pool) {
                if b.is_empty() {
                    *wi = 0.0;
                }
            }
            let b = WeightedIndex::new(&w)
                .expect("a non-empty bucket has positive weight")
                .sample(&mut rng);
            coord.enqueue(pool[b].pop_front().expect("non-empty"));
        }

        for d in coord.schedule(trainer.version, tick) {
            match d {
                Decision::Dispatch { slot, prompt_id, .. } => {
                    let spec = PodSpec::for_task(cfg.fleet.pod_request, tasks[&prompt_id].0.clone());
                    match fleet.create_pod(spec) {
                        Ok(Some(pod)) => {
                            let attempts = coord.slot(slot).map_or(0, |s| s.attempts) as u64;
                            let seed = mix(cfg.seed, STREAM_ROLLOUT, slot.wrapping_mul(1 << 8) ^ attempts);
                            let gen = RolloutGenerator::new(tasks[&prompt_id].0.prompt(), scfg, seed);
                            active.insert(
                                slot,
                                Active {
                                    prompt_id,
                                    pod,
                                    gen,
                                    error: None,
                                },
                            );
                        }
                        Ok(None) | Err(EnvError::NoCapacity) => {
                            failures += 1;
                            for d in coord.on_failed(slot, tick)? {
                                if let Decision::Abandoned { prompt_id } = d {
                                    abandon(prompt_id, &coord, &mut active, &mut scored, &mut fleet)?;
                                }
                            }
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
                Decision::Requeue { slot, .. } => {
                    requeues += 1;
                    if let Some(a) = active.remove(&slot) {
                        fleet.terminate(a.pod)?;
                    }
                }
                Decision::Abandoned { prompt_id } => {
                    abandon(prompt_id, &coord, &mut active, &mut scored, &mut fleet)?;
                }
                Decision::Refused { .. } => {}
            }
        }

        fleet.advance();
        let before = engine.version();
        let version = engine.poll_and_hotload();
        if version != before {
            hotloads += 1;
        }
        let params = engine.params();

        // step every rollout whose pod is up
        let ready_slots: BTreeSet<u64> = active
            .iter()
            .filter(|(_, a)| fleet.pod(a.pod).is_ok_and(|p| p.status == PodStatus::Ready))
            .map(|(s, _)| *s)
            .collect();
        let pods: Vec<u64> = ready_slots.iter().map(|s| active[s].pod).collect();
        let envs = fleet.tasks_mut(&pods)?;
        let mut items: Vec<(&mut Active, &mut TaskState)> = active
            .iter_mut()
            .filter(|(s, _)| ready_slots.contains(s))
            .map(|(_, a)| a)
            .zip(envs)
            .collect();
        let tpt = cfg.train.tokens_per_tick;
        for_each_mut(exec, &mut items, |(a, env)| {
            for _ in 0..tpt {
                match a.gen.step(version, &params, &mut **env) {
                    Ok(StepStatus::Running) => {}
                    Ok(StepStatus::Finished) => break,
                    Err(e) => {
                        a.error = Some(e.to_string());
                        break;
                    }
                }
            }
        });
        drop(items);

        // score finished rollouts; complete groups become ready
        let done: Vec<u64> = active
            .iter()
            .filter(|(_, a)| a.error.is_some() || a.gen.is_finished())
            .map(|(s, _)| *s)
            .collect();
        for slot in done {
            let Some(a) = active.remove(&slot) else { continue };
            let pod = fleet.terminate(a.pod)?;
            let injected = cfg.fleet.failure_rate > 0.0 && rng.gen_bool(cfg.fleet.failure_rate);
            if a.error.is_some() || injected {
                failures += 1;
                for d in coord.on_failed(slot, tick)? {
                    if let Decision::Abandoned { prompt_id } = d {
                        abandon(prompt_id, &coord, &mut active, &mut scored, &mut fleet)?;
                    }
                }
                continue;
            }
            let mut rollout = a.gen.into_rollout();
            let task = &pod.task;
            let behaviors = score_behaviors(&rubrics, &rollout, task);
            let features = rollout_cost_features(&rollout, cfg.reward.summary_accounting)?;
            rollout.final_reward = Some(composite_reward(
                task.task_reward(),
                &behaviors,
                &features,
                &cfg.reward.penalty,
                rollout.overlong,
            )?);
            coord.on_generated(slot)?;
            scored.insert(slot, (a.prompt_id, rollout));
            if let Some(prompt_id) = coord.on_verified(slot)? {
                let ids = coord.group_slots(prompt_id).expect("group is open").to_vec();
                let rollouts: Vec<ChainedRollout> = ids
                    .iter()
                    .map(|i| scored.remove(i).expect("every slot scored").1)
                    .collect();
                let rewards: Vec<f64> = rollouts
                    .iter()
                    .map(|r| r.final_reward.as_ref().expect("scored").total)
                    .collect();
                let g = Group {
                    prompt_id,
                    advantages: Some(group_advantages(&rewards)?),
                    policy_versions: rollouts
                        .iter()
                        .flat_map(|r| r.records().map(|t| t.policy_version))
                        .collect(),
                    rollouts,
                    rewards,
                };
                if let Some(log) = &ckpt_log {
                    log.append(&GroupCheckpoint::from_group(&g, tick)?)?;
                }
                let n = g.rollouts.len() as f64;
                history.push(GroupStats {
                    bucket: tasks[&prompt_id].1,
                    mean_turns: g
                        .rollouts
                        .iter()
                        .flat_map(|r| &r.segments)
                        .map(|s| s.turns as f64)
                        .sum::<f64>()
                        / n,
                    mean_thinking_tokens: g
                        .rollouts
                        .iter()
                        .flat_map(|r| r.records())
                        .filter(|t| t.category == TokenCategory::Thinking)
                        .count() as f64
                        / n,
                });
                ready.push_back(g);
            }
        }

        // train once enough groups are ready, or on whatever is left at the end
        let idle = coord.inflight() == 0 && coord.queued() == 0 && pool.iter().all(VecDeque::is_empty);
        if ready.len() >= cfg.train.groups_per_step || (idle && !ready.is_empty()) {
            let take = ready.len().min(cfg.train.groups_per_step);
            let mut packed = Vec::with_capacity(take);
            let mut discarded = 0;
            for g in ready.drain(..take) {
                let oldest = g.min_version().unwrap_or(trainer.version);
                if cfg.staleness.admits(oldest, trainer.version) {
                    coord.pack(g.prompt_id)?;
                    packed.push(g);
                } else {
                    coord.discard(g.prompt_id, trainer.step)?;
                    if let Some(log) = &audit_log {
                        log.append(&AuditRecord {
                            prompt_id: g.prompt_id,
                            state: Terminal::Discarded,
                            step: trainer.step,
                        })?;
                    }
                    discarded += 1;
                }
            }
            if packed.is_empty() {
                continue;
            }
            let row = trainer.train(&packed, discarded)?;
            // audit before publishing: a crash in between loses the step but
            // can never let a prompt be trained twice
            for g in &packed {
                let rec = coord.on_trained(g.prompt_id, row.step)?;
                if let Some(log) = &audit_log {
                    log.append(&rec)?;
                }
            }
            trainer.publish()?;
            rows.push(row);
            let every = cfg.eval.every;
            if do_eval && every > 0 && trainer.step.is_multiple_of(every) {
                let p = Arc::new(trainer.master.cast::<f32>());
                rows.push(evaluate(cfg, &held_out, trainer.version, p, trainer.step)?);
            }
        }
    }

    let last_eval_version = rows.iter().rev().find(|r| r.kind == RowKind::Eval).map(|r| r.version);
    if do_eval && trainer.step > 0 && last_eval_version != Some(trainer.version) {
        let p = Arc::new(trainer.master.cast::<f32>());
        rows.push(evaluate(cfg, &held_out, trainer.version, p, trainer.step)?);
    }

    let closed: BTreeSet<PromptId> = coord.audit().iter().map(|r| r.prompt_id).collect();
    let result = RunResult {
        audit: coord.audit().to_vec(),
        steps: trainer.step,
        final_version: trainer.version,
        ticks: tick,
        drained: all_prompts.iter().all(|p| closed.contains(p)),
        requeues,
        worker_failures: failures,
        hotloads,
        max_staleness: trainer.max_staleness,
        summarized_nonzero_adv: trainer.summarized,
        seconds: t0.elapsed().as_secs_f64(),
        rows,
    };
    if let Some(p) = &paths {
        std::fs::write(p.metrics(), write_csv(&result.rows)?).map_err(io)?;
        let summary = emit_report(&result.rows, &cfg.thresholds);
        let json = serde_json::to_vec_pretty(&summary).expect("summary serializes");
        std::fs::write(p.summary(), json).map_err(io)?;
        std::fs::write(p.fleet_audit(), fleet.audit_jsonl()).map_err(io)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests;
