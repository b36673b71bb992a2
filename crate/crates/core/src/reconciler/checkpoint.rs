//! Durable state: the append-only group checkpoint log and the audit log of
//! terminal prompt states, both JSONL.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ReconcilerError, StalenessPolicy};
use crate::rollout::{ChainedRollout, Group, PromptId};
use crate::toylm::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Trained,
    /// Dropped unused (stale); never re-run.
    Discarded,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub prompt_id: PromptId,
    pub state: Terminal,
    pub step: u64,
}

/// Every prompt has at most one trained record; returns the first offender.
pub fn check_single_epoch(records: &[AuditRecord]) -> Result<(), PromptId> {
    let mut seen = BTreeSet::new();
    for r in records.iter().filter(|r| r.state == Terminal::Trained) {
        if !seen.insert(r.prompt_id) {
            return Err(r.prompt_id);
        }
    }
    Ok(())
}

fn io(e: impl std::fmt::Display) -> ReconcilerError {
    ReconcilerError::Checkpoint(e.to_string())
}

fn append_line(path: &Path, line: &str) -> Result<(), ReconcilerError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    f.write_all(line.as_bytes()).map_err(io)?;
    f.write_all(b"\n").map_err(io)?;
    f.sync_data().map_err(io)
}

fn read_lines(path: &Path) -> Result<Vec<String>, ReconcilerError> {
    match File::open(path) {
        Ok(f) => BufReader::new(f).lines().collect::<Result<_, _>>().map_err(io),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(io(e)),
    }
}

#[derive(Debug, Clone)]
pub struct AuditLog {
    path: PathBuf,
}

impl AuditLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        AuditLog { path: path.into() }
    }

    pub fn append(&self, r: &AuditRecord) -> Result<(), ReconcilerError> {
        append_line(&self.path, &serde_json::to_string(r).expect("record serializes"))
    }

    pub fn read(&self) -> Result<Vec<AuditRecord>, ReconcilerError> {
        read_audit(&self.path)
    }
}

/// Reads an audit log; a torn final line (crash mid-append) is ignored.
pub fn read_audit(path: &Path) -> Result<Vec<AuditRecord>, ReconcilerError> {
    let lines = read_lines(path)?;
    let n = lines.len();
    let mut out = Vec::with_capacity(n);
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == n => {}
            Err(e) => return Err(io(format!("audit line {}: {e}", i + 1))),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointBody {
    prompt_id: PromptId,
    rollouts: Vec<ChainedRollout>,
    rewards: Vec<f64>,
    advantages: Vec<f64>,
    /// `(first, last)` policy version of each rollout.
    policy_versions: Vec<(u64, u64)>,
    completed_at: u64,
}

/// One scored group with its advantages, sealed by a digest of its content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheckpoint {
    #[serde(flatten)]
    body: CheckpointBody,
    digest: String,
}

impl GroupCheckpoint {
    pub fn from_group(g: &Group, completed_at: u64) -> Result<Self, ReconcilerError> {
        let advantages = g
            .advantages
            .clone()
            .ok_or_else(|| ReconcilerError::Checkpoint("group has no advantages".into()))?;
        let policy_versions = g
            .rollouts
            .iter()
            .map(|r| {
                let mut v = r.records().map(|t| t.policy_version);
                let first = v.next().unwrap_or(0);
                (first, v.last().unwrap_or(first))
            })
            .collect();
        let body = CheckpointBody {
            prompt_id: g.prompt_id,
            rollouts: g.rollouts.clone(),
            rewards: g.rewards.clone(),
            advantages,
            policy_versions,
            completed_at,
        };
        let digest = digest(&body);
        Ok(GroupCheckpoint { body, digest })
    }

    pub fn prompt_id(&self) -> PromptId {
        self.body.prompt_id
    }

    pub fn completed_at(&self) -> u64 {
        self.body.completed_at
    }

    /// Oldest policy version that produced any token.
    pub fn oldest_version(&self) -> u64 {
        self.body.policy_versions.iter().map(|v| v.0).min().unwrap_or(0)
    }

    pub fn verify(&self) -> bool {
        digest(&self.body) == self.digest
    }

    pub fn to_group(&self) -> Group {
        Group {
            prompt_id: self.body.prompt_id,
            rollouts: self.body.rollouts.clone(),
            rewards: self.body.rewards.clone(),
            advantages: Some(self.body.advantages.clone()),
            policy_versions: self
                .body
                .rollouts
                .iter()
                .flat_map(|r| r.records().map(|t| t.policy_version))
                .collect(),
        }
    }
}

fn digest(body: &CheckpointBody) -> String {
    sha256_hex(&serde_json::to_vec(body).expect("checkpoint serializes"))
}

#[derive(Debug, Clone)]
pub struct CheckpointLog {
    path: PathBuf,
}

impl CheckpointLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        CheckpointLog { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, c: &GroupCheckpoint) -> Result<(), ReconcilerError> {
        append_line(&self.path, &serde_json::to_string(c).expect("checkpoint serializes"))
    }

    /// Every record that parses and verifies, plus an error per bad line.
    pub fn load(&self) -> Result<(Vec<GroupCheckpoint>, Vec<String>), ReconcilerError> {
        let mut good = Vec::new();
        let mut errors = Vec::new();
        for (i, line) in read_lines(&self.path)?.iter().enumerate() {
            match serde_json::from_str::<GroupCheckpoint>(line) {
                Ok(c) if c.verify() => good.push(c),
                Ok(_) => errors.push(format!("line {}: digest mismatch", i + 1)),
                Err(e) => errors.push(format!("line {}: {e}", i + 1)),
            }
        }
        Ok((good, errors))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RestoreReport {
    /// Groups fresh enough to train on, in log order.
    pub groups: Vec<Group>,
    /// Too stale: dropped and, being single-epoch, not re-enqueued.
    pub stale: Vec<PromptId>,
    pub errors: Vec<String>,
}

/// Reloads checkpointed groups, skipping prompts that already reached a
/// terminal state, and splits the rest by the staleness policy.
pub fn restore_groups(
    log: &CheckpointLog,
    closed: &BTreeSet<PromptId>,
    current_version: u64,
    policy: &StalenessPolicy,
) -> Result<RestoreReport, ReconcilerError> {
    let (good, errors) = log.load()?;
    let mut latest: BTreeMap<PromptId, usize> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, c) in good.iter().enumerate() {
        if closed.contains(&c.prompt_id()) {
            continue;
        }
        if latest.insert(c.prompt_id(), i).is_none() {
            order.push(c.prompt_id());
        }
    }
    let mut report = RestoreReport {
        errors,
        ..Default::default()
    };
    for p in order {
        let c = &good[latest[&p]];
        if policy.admits(c.oldest_version(), current_version) {
            report.groups.push(c.to_group());
        } else {
            report.stale.push(p);
        }
    }
    Ok(report)
}
