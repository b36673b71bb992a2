//! Sample lifecycle coordination. Every rollout lives in a slot that moves
//! through a fixed state machine; one coordinator owns all slots, admits
//! prompts, dispatches rollouts under the staleness policy, and keeps the
//! registry that guarantees each prompt is trained on at most once.

mod checkpoint;
mod curriculum;
pub mod sim;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rollout::PromptId;

pub use checkpoint::{
    check_single_epoch, read_audit, restore_groups, AuditLog, AuditRecord, CheckpointLog, GroupCheckpoint,
    RestoreReport, Terminal,
};
pub use curriculum::{curriculum_weights, CurriculumConfig, CurriculumSignal, GroupStats};

#[derive(Debug, Error, PartialEq)]
pub enum ReconcilerError {
    #[error("illegal transition {event:?} from {from:?}")]
    Illegal { from: SlotState, event: SlotEvent },
    #[error("unknown slot {0}")]
    UnknownSlot(u64),
    #[error("prompt {0} is not an open group")]
    UnknownGroup(PromptId),
    #[error("prompt {0} was already trained")]
    AlreadyTrained(PromptId),
    #[error("invalid staleness policy: {0}")]
    Policy(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SlotState {
    Pending,
    Generating,
    AwaitingVerification,
    Scored,
    GroupReady,
    Packed,
    Trained,
    Failed,
}

impl SlotState {
    pub const ALL: [SlotState; 8] = [
        SlotState::Pending,
        SlotState::Generating,
        SlotState::AwaitingVerification,
        SlotState::Scored,
        SlotState::GroupReady,
        SlotState::Packed,
        SlotState::Trained,
        SlotState::Failed,
    ];

    pub fn is_active(self) -> bool {
        !matches!(self, SlotState::Trained | SlotState::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotEvent {
    /// Start generating under the given policy version.
    Dispatch {
        version: u64,
    },
    Generated,
    Verified,
    GroupFormed,
    Pack,
    Train,
    Fail,
    Retry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSlot {
    pub id: u64,
    pub prompt_id: PromptId,
    pub state: SlotState,
    pub rollout_start_version: u64,
    pub attempts: u32,
}

impl SampleSlot {
    pub fn new(id: u64, prompt_id: PromptId) -> Self {
        SampleSlot {
            id,
            prompt_id,
            state: SlotState::Pending,
            rollout_start_version: 0,
            attempts: 0,
        }
    }
}

/// The slot transition function.
pub fn advance(slot: &SampleSlot, event: SlotEvent) -> Result<SampleSlot, ReconcilerError> {
    use SlotEvent as E;
    use SlotState as S;
    let mut next = slot.clone();
    next.state = match (slot.state, event) {
        (S::Pending, E::Dispatch { version }) => {
            next.rollout_start_version = version;
            next.attempts += 1;
            S::Generating
        }
        (S::Generating, E::Generated) => S::AwaitingVerification,
        (S::AwaitingVerification, E::Verified) => S::Scored,
        (S::Scored, E::GroupFormed) => S::GroupReady,
        (S::GroupReady, E::Pack) => S::Packed,
        (S::Packed, E::Train) => S::Trained,
        (s, E::Fail) if s.is_active() => S::Failed,
        (S::Failed, E::Retry) => S::Pending,
        (from, event) => return Err(ReconcilerError::Illegal { from, event }),
    };
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StalenessPolicy {
    pub max_version_lag: u64,
    pub max_inflight: usize,
}

impl Default for StalenessPolicy {
    fn default() -> Self {
        StalenessPolicy {
            max_version_lag: 2,
            max_inflight: 16,
        }
    }
}

impl StalenessPolicy {
    pub fn validate(&self) -> Result<(), ReconcilerError> {
        if self.max_version_lag < 1 || self.max_inflight < 1 {
            return Err(ReconcilerError::Policy(
                "max_version_lag and max_inflight must be ≥ 1".into(),
            ));
        }
        Ok(())
    }

    /// Whether tokens sampled from `oldest_version` may enter a step at
    /// `trainer_version`; the extra version covers in-flight adoption.
    pub fn admits(&self, oldest_version: u64, trainer_version: u64) -> bool {
        trainer_version.saturating_sub(oldest_version) <= self.max_version_lag + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinatorConfig {
    pub group_size: usize,
    pub policy: StalenessPolicy,
    /// Dispatch attempts per slot before its whole group is abandoned.
    pub max_attempts: u32,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        CoordinatorConfig {
            group_size: 4,
            policy: StalenessPolicy::default(),
            max_attempts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Dispatch {
        slot: u64,
        prompt_id: PromptId,
        version: u64,
    },
    /// A generating slot breached the lag bound and was sent back to Pending.
    Requeue { slot: u64, prompt_id: PromptId, lag: u64 },
    /// The prompt already reached a terminal state and is never re-run.
    Refused { prompt_id: PromptId },
    /// A slot ran out of attempts; its whole group is dropped.
    Abandoned { prompt_id: PromptId },
}

/// Owns every slot. Workers and the trainer report through the `on_*`
/// methods; each call is processed to completion before the next.
#[derive(Debug, Clone)]
pub struct Coordinator {
    cfg: CoordinatorConfig,
    queue: VecDeque<PromptId>,
    slots: BTreeMap<u64, SampleSlot>,
    groups: BTreeMap<PromptId, Vec<u64>>,
    closed: BTreeSet<PromptId>,
    trained: BTreeSet<PromptId>,
    audit: Vec<AuditRecord>,
    next_slot: u64,
    transitions: u64,
}

impl Coordinator {
    pub fn new(cfg: CoordinatorConfig) -> Result<Self, ReconcilerError> {
        cfg.policy.validate()?;
        if cfg.group_size == 0 || cfg.max_attempts == 0 {
            return Err(ReconcilerError::Policy(
                "group_size and max_attempts must be ≥ 1".into(),
            ));
        }
        Ok(Coordinator {
            cfg,
            queue: VecDeque::new(),
            slots: BTreeMap::new(),
            groups: BTreeMap::new(),
            closed: BTreeSet::new(),
            trained: BTreeSet::new(),
            audit: Vec::new(),
            next_slot: 0,
            transitions: 0,
        })
    }

    /// Rebuilds a coordinator after a restart. Prompts with an audit record
    /// stay closed; `ready` groups (reloaded from checkpoints) come back as
    /// GroupReady; everything else in `pool` is queued again.
    pub fn recover(
        cfg: CoordinatorConfig,
        pool: impl IntoIterator<Item = PromptId>,
        audit: &[AuditRecord],
        ready: &[PromptId],
    ) -> Result<Self, ReconcilerError> {
        let mut c = Self::new(cfg)?;
        for r in audit {
            c.closed.insert(r.prompt_id);
            if r.state == Terminal::Trained {
                c.trained.insert(r.prompt_id);
            }
        }
        c.audit = audit.to_vec();
        for &p in ready {
            if c.closed.contains(&p) || c.groups.contains_key(&p) {
                continue;
            }
            let ids = c.open_group(p);
            for id in ids {
                c.slots.get_mut(&id).unwrap().state = SlotState::GroupReady;
            }
        }
        for p in pool {
            if !c.closed.contains(&p) && !c.groups.contains_key(&p) {
                c.queue.push_back(p);
            }
        }
        Ok(c)
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.cfg
    }

    pub fn enqueue(&mut self, prompt_id: PromptId) {
        self.queue.push_back(prompt_id);
    }

    pub fn slot(&self, id: u64) -> Option<&SampleSlot> {
        self.slots.get(&id)
    }

    pub fn slots(&self) -> impl Iterator<Item = &SampleSlot> {
        self.slots.values()
    }

    pub fn group_slots(&self, prompt_id: PromptId) -> Option<&[u64]> {
        self.groups.get(&prompt_id).map(Vec::as_slice)
    }

    pub fn audit(&self) -> &[AuditRecord] {
        &self.audit
    }

    pub fn is_trained(&self, prompt_id: PromptId) -> bool {
        self.trained.contains(&prompt_id)
    }

    pub fn transitions(&self) -> u64 {
        self.transitions
    }

    pub fn inflight(&self) -> usize {
        self.slots.values().filter(|s| s.state == SlotState::Generating).count()
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    /// Nothing queued and no open groups.
    pub fn is_drained(&self) -> bool {
        self.queue.is_empty() && self.groups.is_empty()
    }

    pub fn groups_in(&self, state: SlotState) -> Vec<PromptId> {
        self.groups
            .iter()
            .filter(|(_, ids)| ids.iter().all(|id| self.slots[id].state == state))
            .map(|(p, _)| *p)
            .collect()
    }

    fn open_group(&mut self, prompt_id: PromptId) -> Vec<u64> {
        let ids: Vec<u64> = (0..self.cfg.group_size as u64).map(|i| self.next_slot + i).collect();
        self.next_slot += ids.len() as u64;
        for &id in &ids {
            self.slots.insert(id, SampleSlot::new(id, prompt_id));
        }
        self.groups.insert(prompt_id, ids.clone());
        ids
    }

    fn step(&mut self, id: u64, event: SlotEvent) -> Result<(), ReconcilerError> {
        let slot = self.slots.get_mut(&id).ok_or(ReconcilerError::UnknownSlot(id))?;
        *slot = advance(slot, event)?;
        self.transitions += 1;
        Ok(())
    }

    fn close_group(&mut self, prompt_id: PromptId, state: Terminal, step: u64) {
        if let Some(ids) = self.groups.remove(&prompt_id) {
            for id in ids {
                self.slots.remove(&id);
            }
        }
        self.closed.insert(prompt_id);
        if state == Terminal::Trained {
            self.trained.insert(prompt_id);
        }
        self.audit.push(AuditRecord { prompt_id, state, step });
    }

    fn abandon(&mut self, prompt_id: PromptId, step: u64) {
        let ids = self.groups.get(&prompt_id).cloned().unwrap_or_default();
        for id in ids {
            if self.slots[&id].state.is_active() {
                self.step(id, SlotEvent::Fail).expect("active slots can fail");
            }
        }
        self.close_group(prompt_id, Terminal::Failed, step);
    }

    /// Fails a slot and retries it, or abandons its group once attempts run out.
    fn fail_slot(&mut self, id: u64, step: u64, out: &mut Vec<Decision>) -> Result<bool, ReconcilerError> {
        let slot = self.slots.get(&id).ok_or(ReconcilerError::UnknownSlot(id))?.clone();
        if slot.attempts >= self.cfg.max_attempts {
            self.abandon(slot.prompt_id, step);
            out.push(Decision::Abandoned {
                prompt_id: slot.prompt_id,
            });
            return Ok(false);
        }
        self.step(id, SlotEvent::Fail)?;
        self.step(id, SlotEvent::Retry)?;
        Ok(true)
    }

    /// Requeues stale generating slots, then dispatches pending slots (opening
    /// new groups from the queue as needed) while in-flight < max_inflight.
    pub fn schedule(&mut self, current_version: u64, step: u64) -> Vec<Decision> {
        let mut out = Vec::new();
        let stale: Vec<(u64, PromptId, u64)> = self
            .slots
            .values()
            .filter(|s| s.state == SlotState::Generating)
            .map(|s| {
                (
                    s.id,
                    s.prompt_id,
                    current_version.saturating_sub(s.rollout_start_version),
                )
            })
            .filter(|&(_, _, lag)| lag > self.cfg.policy.max_version_lag)
            .collect();
        for (slot, prompt_id, lag) in stale {
            if !self.slots.contains_key(&slot) {
                continue; // group already abandoned
            }
            if self.fail_slot(slot, step, &mut out).expect("slot exists") {
                out.push(Decision::Requeue { slot, prompt_id, lag });
            }
        }
        let mut inflight = self.inflight();
        while inflight < self.cfg.policy.max_inflight {
            let next = self
                .slots
                .values()
                .find(|s| s.state == SlotState::Pending)
                .map(|s| s.id);
            let id = match next {
                Some(id) => id,
                None => match self.queue.pop_front() {
                    Some(p) if self.closed.contains(&p) || self.groups.contains_key(&p) => {
                        out.push(Decision::Refused { prompt_id: p });
                        continue;
                    }
                    Some(p) => {
                        self.open_group(p);
                        continue;
                    }
                    None => break,
                },
            };
            self.step(
                id,
                SlotEvent::Dispatch {
                    version: current_version,
                },
            )
            .expect("pending slots can be dispatched");
            out.push(Decision::Dispatch {
                slot: id,
                prompt_id: self.slots[&id].prompt_id,
                version: current_version,
            });
            inflight += 1;
        }
        out
    }

    pub fn on_generated(&mut self, slot: u64) -> Result<(), ReconcilerError> {
        self.step(slot, SlotEvent::Generated)
    }

    /// Marks a rollout scored. Returns the prompt once its whole group is
    /// scored, with every slot moved to GroupReady.
    pub fn on_verified(&mut self, slot: u64) -> Result<Option<PromptId>, ReconcilerError> {
        self.step(slot, SlotEvent::Verified)?;
        let prompt_id = self.slots[&slot].prompt_id;
        let ids = self.groups[&prompt_id].clone();
        if ids.iter().all(|id| self.slots[id].state == SlotState::Scored) {
            for id in ids {
                self.step(id, SlotEvent::GroupFormed)?;
            }
            return Ok(Some(prompt_id));
        }
        Ok(None)
    }

    /// A worker reported failure (crashed environment, verifier error).
    pub fn on_failed(&mut self, slot: u64, step: u64) -> Result<Vec<Decision>, ReconcilerError> {
        let mut out = Vec::new();
        self.fail_slot(slot, step, &mut out)?;
        Ok(out)
    }

    pub fn pack(&mut self, prompt_id: PromptId) -> Result<(), ReconcilerError> {
        let ids = self
            .groups
            .get(&prompt_id)
            .cloned()
            .ok_or(ReconcilerError::UnknownGroup(prompt_id))?;
        for id in ids {
            self.step(id, SlotEvent::Pack)?;
        }
        Ok(())
    }

    /// Drops a group without training on it (e.g. too stale at pack time).
    /// The prompt is closed, not re-queued.
    pub fn discard(&mut self, prompt_id: PromptId, step: u64) -> Result<(), ReconcilerError> {
        if !self.groups.contains_key(&prompt_id) {
            return Err(ReconcilerError::UnknownGroup(prompt_id));
        }
        let ids = self.groups[&prompt_id].clone();
        for id in ids {
            self.step(id, SlotEvent::Fail)?;
        }
        self.close_group(prompt_id, Terminal::Discarded, step);
        Ok(())
    }

    /// Records a packed group as trained. A second attempt is an error.
    pub fn on_trained(&mut self, prompt_id: PromptId, step: u64) -> Result<AuditRecord, ReconcilerError> {
        if self.trained.contains(&prompt_id) {
            return Err(ReconcilerError::AlreadyTrained(prompt_id));
        }
        let ids = self
            .groups
            .get(&prompt_id)
            .cloned()
            .ok_or(ReconcilerError::UnknownGroup(prompt_id))?;
        for id in ids {
            self.step(id, SlotEvent::Train)?;
        }
        self.close_group(prompt_id, Terminal::Trained, step);
        Ok(*self.audit.last().unwrap())
    }
}
