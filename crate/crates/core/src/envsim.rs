//! In-process environment fleet: nodes with capacity and pressure traces,
//! pods with fork/snapshot value semantics, pressure-aware burst placement,
//! and the key-chain task the policy solves with tools.

use std::collections::BTreeMap;
use std::ops::{Add, Sub};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toylm::ToolEnv;
use crate::vocab;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("request does not fit on any node")]
    NoCapacity,
    #[error("unknown pod {0}")]
    UnknownPod(u64),
    #[error("pod {0} is not ready")]
    NotReady(u64),
    #[error("unknown snapshot {0}")]
    UnknownSnapshot(String),
    #[error("invalid fleet config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resources {
    pub cpu: f64,
    pub mem: f64,
    pub disk: f64,
}

impl Resources {
    pub fn new(cpu: f64, mem: f64, disk: f64) -> Self {
        Resources { cpu, mem, disk }
    }

    pub fn scale(self, s: f64) -> Self {
        Resources::new(self.cpu * s, self.mem * s, self.disk * s)
    }

    fn as_array(self) -> [f64; 3] {
        [self.cpu, self.mem, self.disk]
    }

    pub fn fits_within(self, cap: Resources) -> bool {
        self.as_array().iter().zip(cap.as_array()).all(|(a, c)| *a <= c + 1e-9)
    }

    /// Largest per-resource fraction of `cap`.
    pub fn dominant_share(self, cap: Resources) -> f64 {
        self.as_array()
            .iter()
            .zip(cap.as_array())
            .map(|(a, c)| if c > 0.0 { a / c } else { 0.0 })
            .fold(0.0, f64::max)
    }

    fn max_component(self) -> f64 {
        self.cpu.max(self.mem).max(self.disk)
    }

    fn size_key(self) -> f64 {
        self.cpu + self.mem + self.disk
    }
}

impl Add for Resources {
    type Output = Resources;
    fn add(self, o: Resources) -> Resources {
        Resources::new(self.cpu + o.cpu, self.mem + o.mem, self.disk + o.disk)
    }
}

impl Sub for Resources {
    type Output = Resources;
    fn sub(self, o: Resources) -> Resources {
        Resources::new(self.cpu - o.cpu, self.mem - o.mem, self.disk - o.disk)
    }
}

// ---------------------------------------------------------------------------
// key-chain task

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCallRecord {
    pub tool: u32,
    pub arg: u32,
    pub output: Vec<u32>,
}

/// Hidden key chain `k0 → k1 → … → kd`. The prompt reveals `k0`; `lookup(ki)`
/// returns `k(i+1)` and the terminus looks up to NIL; submitting the terminus
/// earns reward 1. Every mutation goes through [`ToolEnv::call_tool`] and is
/// recorded in `calls`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskState {
    pub chain: Vec<u32>,
    /// Tools this environment exposes.
    pub tools: Vec<u32>,
    pub submitted: Option<u32>,
    pub open_todos: Vec<u32>,
    pub calls: Vec<ToolCallRecord>,
}

impl TaskState {
    pub fn new(chain: Vec<u32>) -> Self {
        assert!(!chain.is_empty(), "chain needs a start key");
        TaskState {
            chain,
            tools: vec![vocab::LOOKUP, vocab::SUBMIT, vocab::TODO],
            submitted: None,
            open_todos: Vec::new(),
            calls: Vec::new(),
        }
    }

    /// Chain of `depth` lookups over distinct random keys.
    pub fn random<R: Rng>(depth: usize, rng: &mut R) -> Self {
        let mut keys: Vec<u32> = (vocab::FIRST_KEY..vocab::VOCAB_SIZE as u32).collect();
        keys.shuffle(rng);
        keys.truncate(depth + 1);
        TaskState::new(keys)
    }

    pub fn depth(&self) -> usize {
        self.chain.len() - 1
    }

    pub fn terminus(&self) -> u32 {
        *self.chain.last().unwrap()
    }

    pub fn prompt(&self) -> Vec<u32> {
        vec![vocab::BOS, self.chain[0]]
    }

    pub fn task_reward(&self) -> f64 {
        if self.submitted == Some(self.terminus()) {
            1.0
        } else {
            0.0
        }
    }

    fn lookup(&self, key: u32) -> u32 {
        match self.chain.iter().position(|&k| k == key) {
            Some(i) if i + 1 < self.chain.len() => self.chain[i + 1],
            _ => vocab::NIL,
        }
    }
}

impl ToolEnv for TaskState {
    fn call_tool(&mut self, tool: u32, arg: u32) -> Result<Vec<u32>, String> {
        if !vocab::is_tool(tool) {
            return Err(format!("token {tool} is not a tool"));
        }
        let output = if !self.tools.contains(&tool) {
            vec![vocab::NIL]
        } else {
            match tool {
                vocab::LOOKUP => vec![self.lookup(arg)],
                vocab::SUBMIT => {
                    self.submitted.get_or_insert(arg);
                    vec![]
                }
                vocab::TODO => {
                    // toggles an item: open it, or close it if already open
                    match self.open_todos.iter().position(|&t| t == arg) {
                        Some(i) => {
                            self.open_todos.remove(i);
                        }
                        None => self.open_todos.push(arg),
                    }
                    vec![]
                }
                _ => unreachable!("checked above"),
            }
        };
        self.calls.push(ToolCallRecord {
            tool,
            arg,
            output: output.clone(),
        });
        Ok(output)
    }
}

/// Contents of a pod: a small file store plus the task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PodState {
    pub files: BTreeMap<String, String>,
    pub task: TaskState,
}

// ---------------------------------------------------------------------------
// fleet

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PodStatus {
    Starting,
    Ready,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodSpec {
    pub request: Resources,
    pub state: PodState,
}

impl PodSpec {
    pub fn for_task(request: Resources, task: TaskState) -> Self {
        PodSpec {
            request,
            state: PodState {
                files: BTreeMap::new(),
                task,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pod {
    pub id: u64,
    pub node: usize,
    pub request: Resources,
    pub state: PodState,
    pub status: PodStatus,
    pub started_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub capacity: Resources,
    /// External pressure readings (fractions of capacity), one per tick; the
    /// last reading holds once the trace runs out.
    #[serde(default)]
    pub pressure: Vec<Resources>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhenFull {
    #[default]
    Reject,
    Queue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetConfig {
    pub nodes: Vec<NodeConfig>,
    /// Resource multiplier while a freshly created pod starts up.
    pub startup_factor: f64,
    pub warmup_ticks: u64,
    pub policy: SchedulePolicy,
    pub when_full: WhenFull,
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig {
            nodes: Vec::new(),
            startup_factor: 3.0,
            warmup_ticks: 2,
            policy: SchedulePolicy::default(),
            when_full: WhenFull::Reject,
        }
    }
}

impl FleetConfig {
    pub fn uniform(nodes: usize, capacity: Resources) -> Self {
        FleetConfig {
            nodes: vec![
                NodeConfig {
                    capacity,
                    pressure: Vec::new()
                };
                nodes
            ],
            ..Default::default()
        }
    }

    pub fn from_json(s: &str) -> Result<Self, EnvError> {
        let c: FleetConfig = serde_json::from_str(s).map_err(|e| EnvError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.startup_factor < 1.0 {
            return Err(EnvError::Config("startup_factor must be at least 1".into()));
        }
        if self
            .nodes
            .iter()
            .any(|n| n.capacity.as_array().iter().any(|c| *c < 0.0))
        {
            return Err(EnvError::Config("negative capacity".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulePolicy {
    /// Nodes whose pressure reading reaches this are used only as a last
    /// resort.
    pub hot_threshold: f64,
    pub pressure_weight: f64,
}

impl Default for SchedulePolicy {
    fn default() -> Self {
        SchedulePolicy {
            hot_threshold: 0.9,
            pressure_weight: 1.0,
        }
    }
}

/// Scheduler's view of one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeView {
    pub capacity: Resources,
    pub used: Resources,
    /// Largest per-resource pressure reading, fixed for the pass.
    pub pressure: f64,
}

/// Places `requests` largest-first. Each goes to the feasible node minimizing
/// `(hot, slack + pressure_weight·pressure, index)`, where slack is the
/// dominant free share left after placement (smaller = tighter fit).
/// Returns the chosen node per request, `None` if nothing fits.
pub fn schedule_burst(requests: &[Resources], nodes: &[NodeView], policy: &SchedulePolicy) -> Vec<Option<usize>> {
    let mut used: Vec<Resources> = nodes.iter().map(|n| n.used).collect();
    let mut order: Vec<usize> = (0..requests.len()).collect();
    order.sort_by(|&a, &b| {
        requests[b]
            .size_key()
            .total_cmp(&requests[a].size_key())
            .then(a.cmp(&b))
    });
    let mut out = vec![None; requests.len()];
    for r in order {
        let req = requests[r];
        let best = nodes
            .iter()
            .enumerate()
            .filter(|(i, n)| (used[*i] + req).fits_within(n.capacity))
            .map(|(i, n)| {
                let slack = 1.0 - (used[i] + req).dominant_share(n.capacity);
                let hot = n.pressure >= policy.hot_threshold;
                (hot, slack + policy.pressure_weight * n.pressure, i)
            })
            .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
        if let Some((_, _, i)) = best {
            used[i] = used[i] + req;
            out[r] = Some(i);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    Placed {
        tick: u64,
        pod: u64,
        node: usize,
    },
    Queued {
        tick: u64,
        request: Resources,
    },
    Rejected {
        tick: u64,
        request: Resources,
    },
    Forked {
        tick: u64,
        parent: u64,
        child: u64,
        node: usize,
        same_node: bool,
    },
    Snapshot {
        tick: u64,
        pod: u64,
        snapshot: String,
    },
    Restored {
        tick: u64,
        snapshot: String,
        pod: u64,
        node: usize,
    },
    Ready {
        tick: u64,
        pod: u64,
    },
    Terminated {
        tick: u64,
        pod: u64,
        tool_calls: Vec<ToolCallRecord>,
    },
    FileWrite {
        tick: u64,
        pod: u64,
        path: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstReport {
    pub requested: usize,
    pub placed: usize,
    pub unplaced: usize,
    pub seconds: f64,
    pub pods_per_second: f64,
}

#[derive(Debug, Clone)]
struct Snapshot {
    request: Resources,
    state: PodState,
}

#[derive(Debug, Clone)]
pub struct Fleet {
    config: FleetConfig,
    pods: BTreeMap<u64, Pod>,
    queue: Vec<PodSpec>,
    snapshots: BTreeMap<String, Snapshot>,
    next_pod: u64,
    tick: u64,
    audit: Vec<AuditEvent>,
}

impl Fleet {
    pub fn new(config: FleetConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Fleet {
            config,
            pods: BTreeMap::new(),
            queue: Vec::new(),
            snapshots: BTreeMap::new(),
            next_pod: 0,
            tick: 0,
            audit: Vec::new(),
        })
    }

    pub fn config(&self) -> &FleetConfig {
        &self.config
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn pod(&self, id: u64) -> Result<&Pod, EnvError> {
        self.pods.get(&id).ok_or(EnvError::UnknownPod(id))
    }

    pub fn pods(&self) -> impl Iterator<Item = &Pod> {
        self.pods.values()
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn audit(&self) -> &[AuditEvent] {
        &self.audit
    }

    pub fn audit_jsonl(&self) -> String {
        self.audit
            .iter()
            .map(|e| serde_json::to_string(e).expect("audit events serialize") + "\n")
            .collect()
    }

    /// Resources a pod currently consumes (inflated during startup).
    fn footprint(&self, p: &Pod) -> Resources {
        match p.status {
            PodStatus::Starting => p.request.scale(self.config.startup_factor),
            PodStatus::Ready => p.request,
            PodStatus::Terminated => Resources::default(),
        }
    }

    pub fn node_usage(&self, node: usize) -> Resources {
        self.pods
            .values()
            .filter(|p| p.node == node)
            .fold(Resources::default(), |acc, p| acc + self.footprint(p))
    }

    pub fn pressure(&self, node: usize) -> f64 {
        let trace = &self.config.nodes[node].pressure;
        match trace.len() {
            0 => 0.0,
            n => trace[(self.tick as usize).min(n - 1)].max_component(),
        }
    }

    fn views(&self) -> Vec<NodeView> {
        (0..self.config.nodes.len())
            .map(|i| NodeView {
                capacity: self.config.nodes[i].capacity,
                used: self.node_usage(i),
                pressure: self.pressure(i),
            })
            .collect()
    }

    /// Every node's usage within capacity.
    pub fn check_capacity(&self) -> bool {
        (0..self.config.nodes.len()).all(|i| self.node_usage(i).fits_within(self.config.nodes[i].capacity))
    }

    fn insert(&mut self, node: usize, request: Resources, state: PodState, status: PodStatus) -> u64 {
        let id = self.next_pod;
        self.next_pod += 1;
        self.pods.insert(
            id,
            Pod {
                id,
                node,
                request,
                state,
                status,
                started_at: self.tick,
            },
        );
        id
    }

    pub fn create_pod(&mut self, spec: PodSpec) -> Result<Option<u64>, EnvError> {
        Ok(self.create_burst(vec![spec])?.0.pop().flatten())
    }

    /// Places a burst of new pods in one scheduling pass. Pods that do not
    /// fit are queued or rejected per config; with `Reject` and a single
    /// request that fits nowhere, this is an error.
    pub fn create_burst(&mut self, specs: Vec<PodSpec>) -> Result<(Vec<Option<u64>>, BurstReport), EnvError> {
        let t0 = Instant::now();
        let factor = self.config.startup_factor;
        let needs: Vec<Resources> = specs.iter().map(|s| s.request.scale(factor)).collect();
        let plan = schedule_burst(&needs, &self.views(), &self.config.policy);
        let single = specs.len() == 1;
        let mut ids = Vec::with_capacity(specs.len());
        for (spec, node) in specs.into_iter().zip(plan) {
            match node {
                Some(n) => {
                    let id = self.insert(n, spec.request, spec.state, PodStatus::Starting);
                    self.audit.push(AuditEvent::Placed {
                        tick: self.tick,
                        pod: id,
                        node: n,
                    });
                    ids.push(Some(id));
                }
                None => {
                    let request = spec.request;
                    match self.config.when_full {
                        WhenFull::Queue => {
                            self.queue.push(spec);
                            self.audit.push(AuditEvent::Queued {
                                tick: self.tick,
                                request,
                            });
                        }
                        WhenFull::Reject => {
                            self.audit.push(AuditEvent::Rejected {
                                tick: self.tick,
                                request,
                            });
                            if single {
                                return Err(EnvError::NoCapacity);
                            }
                        }
                    }
                    ids.push(None);
                }
            }
        }
        let seconds = t0.elapsed().as_secs_f64();
        let placed = ids.iter().flatten().count();
        let report = BurstReport {
            requested: ids.len(),
            placed,
            unplaced: ids.len() - placed,
            seconds,
            pods_per_second: placed as f64 / seconds.max(1e-9),
        };
        Ok((ids, report))
    }

    /// Advances the simulated clock: warm pods become ready and queued
    /// requests are retried.
    pub fn advance(&mut self) -> Vec<u64> {
        self.tick += 1;
        let warm = self.config.warmup_ticks;
        let tick = self.tick;
        for p in self.pods.values_mut() {
            if p.status == PodStatus::Starting && tick >= p.started_at + warm {
                p.status = PodStatus::Ready;
                self.audit.push(AuditEvent::Ready { tick, pod: p.id });
            }
        }
        if self.queue.is_empty() {
            return Vec::new();
        }
        let pending = std::mem::take(&mut self.queue);
        let before = self.audit.len();
        let (ids, _) = self.create_burst(pending).expect("queue mode never errors");
        // re-queued requests were already audited once
        self.audit
            .retain_from(before, |e| !matches!(e, AuditEvent::Queued { .. }));
        ids.into_iter().flatten().collect()
    }

    /// Advances until `pod` is ready.
    pub fn wait_ready(&mut self, pod: u64) -> Result<(), EnvError> {
        while self.pod(pod)?.status == PodStatus::Starting {
            self.advance();
        }
        match self.pod(pod)?.status {
            PodStatus::Ready => Ok(()),
            _ => Err(EnvError::NotReady(pod)),
        }
    }

    fn ready_pod(&self, id: u64) -> Result<&Pod, EnvError> {
        let p = self.pod(id)?;
        if p.status != PodStatus::Ready {
            return Err(EnvError::NotReady(id));
        }
        Ok(p)
    }

    /// Copies a ready pod. The child resumes from memory, so it is ready at
    /// once and skips the startup burst. The parent's node is tried first.
    pub fn fork_pod(&mut self, id: u64) -> Result<u64, EnvError> {
        let parent = self.ready_pod(id)?;
        let (request, state, home) = (parent.request, parent.state.clone(), parent.node);
        let same = (self.node_usage(home) + request).fits_within(self.config.nodes[home].capacity);
        let node = if same {
            home
        } else {
            schedule_burst(&[request], &self.views(), &self.config.policy)[0].ok_or(EnvError::NoCapacity)?
        };
        let child = self.insert(node, request, state, PodStatus::Ready);
        self.audit.push(AuditEvent::Forked {
            tick: self.tick,
            parent: id,
            child,
            node,
            same_node: node == home,
        });
        Ok(child)
    }

    pub fn snapshot(&mut self, id: u64) -> Result<String, EnvError> {
        let p = self.ready_pod(id)?;
        let snap = Snapshot {
            request: p.request,
            state: p.state.clone(),
        };
        let name = format!("snap-{:06}", self.snapshots.len());
        self.snapshots.insert(name.clone(), snap);
        self.audit.push(AuditEvent::Snapshot {
            tick: self.tick,
            pod: id,
            snapshot: name.clone(),
        });
        Ok(name)
    }

    pub fn restore(&mut self, snapshot: &str) -> Result<u64, EnvError> {
        let snap = self
            .snapshots
            .get(snapshot)
            .ok_or_else(|| EnvError::UnknownSnapshot(snapshot.to_string()))?
            .clone();
        let node =
            schedule_burst(&[snap.request], &self.views(), &self.config.policy)[0].ok_or(EnvError::NoCapacity)?;
        let id = self.insert(node, snap.request, snap.state, PodStatus::Ready);
        self.audit.push(AuditEvent::Restored {
            tick: self.tick,
            snapshot: snapshot.to_string(),
            pod: id,
            node,
        });
        Ok(id)
    }

    pub fn terminate(&mut self, id: u64) -> Result<PodState, EnvError> {
        let tick = self.tick;
        let p = self.pods.get_mut(&id).ok_or(EnvError::UnknownPod(id))?;
        p.status = PodStatus::Terminated;
        let state = p.state.clone();
        self.audit.push(AuditEvent::Terminated {
            tick,
            pod: id,
            tool_calls: state.task.calls.clone(),
        });
        self.pods.remove(&id);
        Ok(state)
    }

    pub fn call_tool(&mut self, id: u64, tool: u32, arg: u32) -> Result<Vec<u32>, EnvError> {
        self.ready_pod(id)?;
        let p = self.pods.get_mut(&id).expect("checked");
        p.state.task.call_tool(tool, arg).map_err(|_| EnvError::NotReady(id))
    }

    pub fn write_file(&mut self, id: u64, path: &str, contents: &str) -> Result<(), EnvError> {
        self.ready_pod(id)?;
        let p = self.pods.get_mut(&id).expect("checked");
        p.state.files.insert(path.to_string(), contents.to_string());
        self.audit.push(AuditEvent::FileWrite {
            tick: self.tick,
            pod: id,
            path: path.to_string(),
        });
        Ok(())
    }

    /// Mutable task handles for the given ready pods, for stepping rollouts
    /// in parallel. Each pod appears at most once.
    pub fn tasks_mut(&mut self, ids: &[u64]) -> Result<Vec<&mut TaskState>, EnvError> {
        for &id in ids {
            self.ready_pod(id)?;
        }
        let mut by_id: BTreeMap<u64, &mut TaskState> = self
            .pods
            .iter_mut()
            .filter(|(id, _)| ids.contains(id))
            .map(|(id, p)| (*id, &mut p.state.task))
            .collect();
        ids.iter()
            .map(|id| by_id.remove(id).ok_or(EnvError::UnknownPod(*id)))
            .collect()
    }
}

trait RetainFrom<T> {
    fn retain_from(&mut self, start: usize, keep: impl FnMut(&T) -> bool);
}

impl<T> RetainFrom<T> for Vec<T> {
    fn retain_from(&mut self, start: usize, mut keep: impl FnMut(&T) -> bool) {
        let tail: Vec<T> = self.drain(start..).filter(|e| keep(e)).collect();
        self.extend(tail);
    }
}
