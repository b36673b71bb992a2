//! Kill/restart harness. Simulated workers generate placeholder rollouts
//! while the coordinator, checkpoint log and audit log run for real; the
//! process is "killed" at chosen operation counts (dropping all in-memory
//! state) and recovered from the durable logs alone.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::*;
use crate::reward::{group_advantages, RewardBreakdown};
use crate::rollout::{ChainedRollout, Group, Segment, TokenCategory, TokenRecord};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub prompts: usize,
    pub coordinator: CoordinatorConfig,
    /// Groups consumed per training step.
    pub groups_per_step: usize,
    /// Rollout durations are uniform in `1..=max_rollout_ticks`.
    pub max_rollout_ticks: u64,
    pub worker_failure_rate: f64,
    pub kills: usize,
    pub max_ticks: u64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            prompts: 40,
            coordinator: CoordinatorConfig {
                group_size: 4,
                policy: StalenessPolicy {
                    max_version_lag: 2,
                    max_inflight: 12,
                },
                max_attempts: 3,
            },
            groups_per_step: 2,
            max_rollout_ticks: 4,
            worker_failure_rate: 0.05,
            kills: 5,
            max_ticks: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub audit: Vec<AuditRecord>,
    pub trained: usize,
    pub discarded: usize,
    pub failed: usize,
    pub restarts: usize,
    pub reloaded_groups: usize,
    /// Largest `trainer version − token version` among trained tokens.
    pub max_trained_lag: u64,
    pub final_version: u64,
    pub ticks: u64,
    /// Every prompt reached a terminal state.
    pub drained: bool,
}

struct Crash;

struct Durable {
    audit: AuditLog,
    checkpoints: CheckpointLog,
    version_path: PathBuf,
}

impl Durable {
    fn version(&self) -> u64 {
        std::fs::read_to_string(&self.version_path)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .unwrap_or(0)
    }

    fn set_version(&self, v: u64) -> Result<(), ReconcilerError> {
        let tmp = self.version_path.with_extension("tmp");
        std::fs::write(&tmp, v.to_string()).map_err(|e| ReconcilerError::Checkpoint(e.to_string()))?;
        std::fs::rename(&tmp, &self.version_path).map_err(|e| ReconcilerError::Checkpoint(e.to_string()))
    }
}

/// In-memory process state; lost on a kill.
struct Process {
    coord: Coordinator,
    version: u64,
    work: BTreeMap<u64, (u64, u64)>,
    rollouts: BTreeMap<u64, ChainedRollout>,
    ready: Vec<Group>,
}

struct Harness<'a> {
    cfg: &'a SimConfig,
    durable: Durable,
    rng: ChaCha8Rng,
    ops: u64,
    kill_at: Vec<u64>,
    max_lag: u64,
    reloaded: usize,
}

impl Harness<'_> {
    /// Counts one operation and crashes if it is a kill point.
    fn op(&mut self) -> Result<(), Crash> {
        self.ops += 1;
        if self.kill_at.last() == Some(&self.ops) {
            self.kill_at.pop();
            return Err(Crash);
        }
        Ok(())
    }

    fn boot(&mut self, pool: &[PromptId]) -> Result<Process, ReconcilerError> {
        let audit = self.durable.audit.read()?;
        let closed: BTreeSet<PromptId> = audit.iter().map(|r| r.prompt_id).collect();
        let version = self.durable.version();
        let restored = restore_groups(
            &self.durable.checkpoints,
            &closed,
            version,
            &self.cfg.coordinator.policy,
        )?;
        let mut audit = audit;
        for &p in &restored.stale {
            let r = AuditRecord {
                prompt_id: p,
                state: Terminal::Discarded,
                step: version,
            };
            self.durable.audit.append(&r)?;
            audit.push(r);
        }
        self.reloaded += restored.groups.len();
        let ready_ids: Vec<PromptId> = restored.groups.iter().map(|g| g.prompt_id).collect();
        let coord = Coordinator::recover(self.cfg.coordinator, pool.iter().copied(), &audit, &ready_ids)?;
        Ok(Process {
            coord,
            version,
            work: BTreeMap::new(),
            rollouts: BTreeMap::new(),
            ready: restored.groups,
        })
    }

    fn fake_rollout(&mut self, start: u64, end: u64) -> ChainedRollout {
        let rec = |v| TokenRecord {
            token_id: crate::vocab::SUBMIT,
            category: TokenCategory::ToolCall,
            sampling_logprob: -0.5,
            policy_version: v,
        };
        let reward = self.rng.gen_range(0.0..1.0);
        ChainedRollout {
            segments: vec![Segment {
                prompt_tokens: vec![crate::vocab::BOS],
                records: vec![rec(start), rec(end)],
                tool_calls: 1,
                turns: 1,
                router_traces: Vec::new(),
            }],
            summaries: Vec::new(),
            env_snapshot_ref: None,
            final_reward: Some(RewardBreakdown {
                task_reward: reward,
                behavior_rewards: Vec::new(),
                length_penalty: 0.0,
                total: reward,
                zero_loss_weight: false,
            }),
            overlong: false,
        }
    }

    fn tick(&mut self, p: &mut Process, tick: u64) -> Result<Result<(), Crash>, ReconcilerError> {
        macro_rules! op {
            () => {
                if let Err(c) = self.op() {
                    return Ok(Err(c));
                }
            };
        }
        for d in p.coord.schedule(p.version, tick) {
            op!();
            match d {
                Decision::Dispatch { slot, version, .. } => {
                    let dur = self.rng.gen_range(1..=self.cfg.max_rollout_ticks);
                    p.work.insert(slot, (dur, version));
                }
                Decision::Requeue { slot, .. } => {
                    p.work.remove(&slot);
                }
                Decision::Abandoned { prompt_id } => {
                    p.work
                        .retain(|s, _| p.coord.slot(*s).is_some_and(|x| x.prompt_id != prompt_id));
                    self.durable.audit.append(last_record(&p.coord, prompt_id))?;
                }
                Decision::Refused { .. } => {}
            }
        }
        let ids: Vec<u64> = p.work.keys().copied().collect();
        for slot in ids {
            let Some(entry) = p.work.get_mut(&slot) else { continue };
            entry.0 -= 1;
            if entry.0 > 0 {
                continue;
            }
            let (_, start) = p.work.remove(&slot).unwrap();
            if p.coord.slot(slot).is_none() {
                continue;
            }
            op!();
            if self.rng.gen_bool(self.cfg.worker_failure_rate) {
                for d in p.coord.on_failed(slot, tick)? {
                    if let Decision::Abandoned { prompt_id } = d {
                        p.work
                            .retain(|s, _| p.coord.slot(*s).is_some_and(|x| x.prompt_id != prompt_id));
                        self.durable.audit.append(last_record(&p.coord, prompt_id))?;
                    }
                }
                continue;
            }
            let r = self.fake_rollout(start, p.version);
            p.rollouts.insert(slot, r);
            p.coord.on_generated(slot)?;
            op!();
            if let Some(prompt_id) = p.coord.on_verified(slot)? {
                let ids = p.coord.group_slots(prompt_id).unwrap().to_vec();
                let rollouts: Vec<ChainedRollout> = ids.iter().map(|i| p.rollouts.remove(i).unwrap()).collect();
                let rewards: Vec<f64> = rollouts
                    .iter()
                    .map(|r| r.final_reward.as_ref().unwrap().total)
                    .collect();
                let g = Group {
                    prompt_id,
                    advantages: Some(group_advantages(&rewards).expect("finite rewards")),
                    policy_versions: rollouts
                        .iter()
                        .flat_map(|r| r.records().map(|t| t.policy_version))
                        .collect(),
                    rollouts,
                    rewards,
                };
                self.durable
                    .checkpoints
                    .append(&GroupCheckpoint::from_group(&g, tick)?)?;
                op!();
                p.ready.push(g);
            }
        }
        let idle = p.coord.inflight() == 0 && p.coord.queued() == 0;
        if p.ready.len() >= self.cfg.groups_per_step || (idle && !p.ready.is_empty()) {
            let batch: Vec<Group> = p.ready.drain(..p.ready.len().min(self.cfg.groups_per_step)).collect();
            let mut packed = Vec::new();
            for g in batch {
                if self
                    .cfg
                    .coordinator
                    .policy
                    .admits(g.min_version().unwrap_or(0), p.version)
                {
                    p.coord.pack(g.prompt_id)?;
                    packed.push(g);
                } else {
                    self.durable.audit.append(&AuditRecord {
                        prompt_id: g.prompt_id,
                        state: Terminal::Discarded,
                        step: p.version,
                    })?;
                    op!();
                    p.coord.discard(g.prompt_id, p.version)?;
                }
                op!();
            }
            if !packed.is_empty() {
                // audit first: a kill before publishing loses the step but
                // can never train the same prompt twice
                for g in &packed {
                    self.durable.audit.append(&AuditRecord {
                        prompt_id: g.prompt_id,
                        state: Terminal::Trained,
                        step: p.version,
                    })?;
                    op!();
                    p.coord.on_trained(g.prompt_id, p.version)?;
                    let lag = p.version - g.min_version().unwrap_or(p.version);
                    self.max_lag = self.max_lag.max(lag);
                }
                p.version += 1;
                self.durable.set_version(p.version)?;
                op!();
            }
        }
        Ok(Ok(()))
    }
}

fn last_record(c: &Coordinator, prompt_id: PromptId) -> &AuditRecord {
    c.audit()
        .iter()
        .rev()
        .find(|r| r.prompt_id == prompt_id)
        .expect("abandoned groups are audited")
}

/// Runs the simulation in `dir` (which should start empty).
pub fn run_with_kills(cfg: &SimConfig, dir: &Path) -> Result<SimReport, ReconcilerError> {
    std::fs::create_dir_all(dir).map_err(|e| ReconcilerError::Checkpoint(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool: Vec<PromptId> = (0..cfg.prompts).map(|_| PromptId::random(&mut rng)).collect();
    // rough operation budget of a clean run, so kills land throughout it
    let horizon = (cfg.prompts * cfg.coordinator.group_size * 3).max(1) as u64;
    let mut kill_at: Vec<u64> = (0..cfg.kills).map(|_| rng.gen_range(1..=horizon)).collect();
    kill_at.sort_unstable_by(|a, b| b.cmp(a));
    kill_at.dedup();
    let mut h = Harness {
        cfg,
        durable: Durable {
            audit: AuditLog::new(dir.join("audit.jsonl")),
            checkpoints: CheckpointLog::new(dir.join("groups.jsonl")),
            version_path: dir.join("version"),
        },
        rng,
        ops: 0,
        kill_at,
        max_lag: 0,
        reloaded: 0,
    };
    let mut p = h.boot(&pool)?;
    let mut restarts = 0;
    let mut tick = 0;
    while tick < cfg.max_ticks && !p.coord.is_drained() {
        tick += 1;
        if h.tick(&mut p, tick)?.is_err() {
            restarts += 1;
            p = h.boot(&pool)?;
        }
    }
    let audit = h.durable.audit.read()?;
    let count = |t: Terminal| audit.iter().filter(|r| r.state == t).count();
    let terminal: BTreeSet<PromptId> = audit.iter().map(|r| r.prompt_id).collect();
    Ok(SimReport {
        trained: count(Terminal::Trained),
        discarded: count(Terminal::Discarded),
        failed: count(Terminal::Failed),
        drained: pool.iter().all(|q| terminal.contains(q)),
        restarts,
        reloaded_groups: h.reloaded,
        max_trained_lag: h.max_lag,
        final_version: h.durable.version(),
        ticks: tick,
        audit,
    })
}
