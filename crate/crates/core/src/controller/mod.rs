//! The controller: replicated system state behind serializable
//! transactions, master leader/follower management with min-latency
//! election, coordinated checkpoints, and the policy that turns workload
//! decisions into deployer actions.

pub mod election;
pub mod state;
pub mod store;
pub mod tx;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use election::{
    elect_leader, Election, ElectionError, ElectionStrategy, MinLatency, Role, RoleState,
};
pub use state::{ResourceEntry, SystemState};
pub use store::{
    Checkpoint, CheckpointStore, FileStore, LeaderRecord, Loaded, MemoryStore, StateStore,
    StoreError,
};
pub use tx::{Op, Transaction, TxEngine, TxError, TxOutcome, TxStatus};

use crate::deployer::{
    choose_placement, validate_constraints, DeployCtx, DeployEffect, DeployError, DeployTimer,
    Deployer, DeployerConfig, TaskKind,
};
use crate::fabric::{NodeId, VmType};
use crate::manifest::{ApplicationManifest, ScaleAction};
use crate::workload::{DecisionSource, ScaleDecision};
use crate::SimTime;

const ACTOR: &str = "controller";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub heartbeat: Duration,
    pub misses_to_fail: u32,
    pub election_window: Duration,
    pub checkpoint_interval: Duration,
    pub retain_checkpoints: usize,
    pub discovery_interval: Duration,
    /// Installing the master stack on a freshly provisioned node.
    pub master_stack_deploy: Duration,
    /// Starting a replacement follower on standby capacity.
    pub follower_start_delay: Duration,
    pub scale_in_cooldown: Duration,
    pub deployer: DeployerConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            heartbeat: Duration::from_millis(100),
            misses_to_fail: 3,
            election_window: election::DEFAULT_ELECTION_WINDOW,
            checkpoint_interval: Duration::from_secs(30),
            retain_checkpoints: store::DEFAULT_RETAIN,
            discovery_interval: Duration::from_secs(30),
            master_stack_deploy: Duration::from_secs(126),
            follower_start_delay: Duration::from_millis(900),
            scale_in_cooldown: Duration::from_secs(60),
            deployer: DeployerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ControllerError {
    #[error("no master can be placed: {0}")]
    NoMasterPlacement(String),
    #[error("no leader is available")]
    NoLeader,
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Tx(#[from] TxError),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MasterStatus {
    Starting,
    Running,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Master {
    pub id: String,
    pub node: NodeId,
    pub provider: String,
    pub role: Role,
    pub status: MasterStatus,
    pub last_heartbeat: SimTime,
    misses: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "timer", rename_all = "snake_case")]
pub enum ControlTimer {
    ElectionComplete { term: u64 },
    FollowerStart { replaces: String },
    MasterStackReady { master: String },
    Deploy(DeployTimer),
}

/// Work for the event loop after a controller call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Effect {
    Schedule { at: SimTime, timer: ControlTimer },
    Deploy(DeployEffect),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecoveryKind {
    Leader,
    Follower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub kind: RecoveryKind,
    pub failed_master: String,
    pub failed_provider: String,
    pub failed_at: Option<SimTime>,
    pub detected_at: SimTime,
    pub election_ms: Option<f64>,
    pub new_leader: Option<String>,
    pub restored_checkpoint: Option<u64>,
    pub state_matches_checkpoint: Option<bool>,
    pub replacement: Option<String>,
    pub replacement_provider: Option<String>,
    pub replacement_ready_at: Option<SimTime>,
    pub agents_rebound_at: Option<SimTime>,
    pub redeploy_ms: Option<f64>,
    pub completed_at: Option<SimTime>,
    pub total_ms: Option<f64>,
    pub unavailable: bool,
    pub blocked: Option<String>,
}

impl RecoveryReport {
    fn new(
        kind: RecoveryKind,
        failed: &Master,
        failed_at: Option<SimTime>,
        detected_at: SimTime,
    ) -> Self {
        RecoveryReport {
            kind,
            failed_master: failed.id.clone(),
            failed_provider: failed.provider.clone(),
            failed_at,
            detected_at,
            election_ms: None,
            new_leader: None,
            restored_checkpoint: None,
            state_matches_checkpoint: None,
            replacement: None,
            replacement_provider: None,
            replacement_ready_at: None,
            agents_rebound_at: None,
            redeploy_ms: None,
            completed_at: None,
            total_ms: None,
            unavailable: false,
            blocked: None,
        }
    }

    fn complete(&mut self, at: SimTime) {
        self.completed_at = Some(at);
        let origin = self.failed_at.unwrap_or(self.detected_at);
        self.total_ms = Some((at - origin).as_secs_f64() * 1e3);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleEvent {
    pub at: SimTime,
    pub application: String,
    pub component: String,
    pub action: ScaleAction,
    pub source: DecisionSource,
    pub episode: SimTime,
    pub instance: Option<String>,
    pub provider: Option<String>,
    pub completed_at: Option<SimTime>,
    pub ok: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Scale(ScaleDecision),
    ReplaceInstance { instance: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{reason}")]
pub struct Rejected {
    pub reason: String,
    /// Silently superseded rather than refused.
    pub dropped: bool,
}

fn reject(reason: impl Into<String>) -> Rejected {
    Rejected {
        reason: reason.into(),
        dropped: false,
    }
}

#[derive(Debug, Clone)]
struct PendingElection {
    term: u64,
    winner: String,
    report: usize,
}

#[derive(Debug, Clone)]
enum PendingTask {
    Initial,
    Scale(usize),
    Replace(String),
}

/// The master control plane. One instance models the whole leader and
/// follower group; roles decide who acts.
pub struct Controller {
    config: ControllerConfig,
    pub deployer: Deployer,
    engine: TxEngine,
    checkpoints: CheckpointStore,
    strategy: Box<dyn ElectionStrategy + Send>,
    rng: ChaCha8Rng,
    masters: BTreeMap<String, Master>,
    next_master: u32,
    term: u64,
    bindings: BTreeMap<NodeId, String>,
    injected: BTreeMap<NodeId, SimTime>,
    election: Option<PendingElection>,
    active_recovery: Option<usize>,
    unavailable: bool,
    last_scale: BTreeMap<(String, String), SimTime>,
    tasks: BTreeMap<u64, PendingTask>,
    scale_events: Vec<ScaleEvent>,
    recoveries: Vec<RecoveryReport>,
    last_checkpoint: Option<Checkpoint>,
}

fn wrap(effects: Vec<DeployEffect>) -> Vec<Effect> {
    effects
        .into_iter()
        .map(|e| match e {
            DeployEffect::Schedule { at, timer } => Effect::Schedule {
                at,
                timer: ControlTimer::Deploy(timer),
            },
            other => Effect::Deploy(other),
        })
        .collect()
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

impl Controller {
    pub fn new(config: ControllerConfig, store: Box<dyn StateStore + Send>, seed: u64) -> Self {
        Controller {
            deployer: Deployer::new(config.deployer),
            engine: TxEngine::new(),
            checkpoints: CheckpointStore::new(store, config.retain_checkpoints),
            strategy: Box::new(MinLatency {
                window: config.election_window,
            }),
            rng: ChaCha8Rng::seed_from_u64(seed),
            masters: BTreeMap::new(),
            next_master: 1,
            term: 0,
            bindings: BTreeMap::new(),
            injected: BTreeMap::new(),
            election: None,
            active_recovery: None,
            unavailable: false,
            last_scale: BTreeMap::new(),
            tasks: BTreeMap::new(),
            scale_events: Vec::new(),
            recoveries: Vec::new(),
            last_checkpoint: None,
            config,
        }
    }

    pub fn with_strategy(mut self, strategy: Box<dyn ElectionStrategy + Send>) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn engine(&self) -> &TxEngine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut TxEngine {
        &mut self.engine
    }

    pub fn checkpoints(&self) -> &CheckpointStore {
        &self.checkpoints
    }

    pub fn checkpoints_mut(&mut self) -> &mut CheckpointStore {
        &mut self.checkpoints
    }

    pub fn last_checkpoint(&self) -> Option<&Checkpoint> {
        self.last_checkpoint.as_ref()
    }

    pub fn masters(&self) -> &BTreeMap<String, Master> {
        &self.masters
    }

    pub fn leader(&self) -> Option<&Master> {
        self.masters
            .values()
            .find(|m| m.role == Role::Leader && m.status == MasterStatus::Running)
    }

    pub fn followers(&self) -> impl Iterator<Item = &Master> {
        self.masters
            .values()
            .filter(|m| m.role == Role::Follower && m.status != MasterStatus::Failed)
    }

    pub fn term(&self) -> u64 {
        self.term
    }

    pub fn bindings(&self) -> &BTreeMap<NodeId, String> {
        &self.bindings
    }

    pub fn is_unavailable(&self) -> bool {
        self.unavailable
    }

    pub fn recoveries(&self) -> &[RecoveryReport] {
        &self.recoveries
    }

    pub fn scale_events(&self) -> &[ScaleEvent] {
        &self.scale_events
    }

    pub fn master_node(&self, node: NodeId) -> Option<&Master> {
        self.masters.values().find(|m| m.node == node)
    }

    /// True while an election, a recovery or a deployment is under way.
    pub fn busy(&self) -> bool {
        self.election.is_some() || self.active_recovery.is_some() || self.deployer.busy()
    }

    /// Records when a failure was injected, for recovery measurement only.
    pub fn note_injected_failure(&mut self, node: NodeId, at: SimTime) {
        self.injected.entry(node).or_insert(at);
    }

    pub fn state(&self) -> SystemState {
        SystemState::from_kv(&self.engine.snapshot())
    }

    fn master_vm(ctx: &DeployCtx, provider: &str) -> Option<VmType> {
        let p = ctx.fabric.provider(provider).ok()?;
        [VmType::Medium, VmType::Small, VmType::Large, VmType::Micro]
            .into_iter()
            .find(|v| p.offers(*v))
    }

    fn new_master_id(&mut self) -> String {
        let id = format!("master-{}", self.next_master);
        self.next_master += 1;
        id
    }

    /// Starts the master group on running nodes, one per provider, elects
    /// the first leader and takes the initial checkpoint.
    pub fn bootstrap(
        &mut self,
        ctx: &mut DeployCtx,
        providers: &[String],
    ) -> Result<Vec<Effect>, ControllerError> {
        let now = ctx.fabric.now();
        for p in providers {
            let vm = Self::master_vm(ctx, p)
                .ok_or_else(|| ControllerError::NoMasterPlacement(p.clone()))?;
            let node = ctx
                .fabric
                .provision_running(p, vm)
                .map_err(|e| ControllerError::NoMasterPlacement(e.to_string()))?;
            let id = self.new_master_id();
            self.masters.insert(
                id.clone(),
                Master {
                    id,
                    node,
                    provider: p.clone(),
                    role: Role::Follower,
                    status: MasterStatus::Running,
                    last_heartbeat: now,
                    misses: 0,
                },
            );
        }
        let candidates: Vec<RoleState> = self
            .masters
            .values()
            .map(|m| self.role_state(ctx, m))
            .collect();
        let election = self
            .strategy
            .elect(&candidates)
            .map_err(|_| ControllerError::NoLeader)?;
        self.masters
            .get_mut(&election.winner)
            .expect("candidate")
            .role = Role::Leader;
        self.term = 1;
        let record = LeaderRecord {
            master_id: election.winner.clone(),
            term: self.term,
            timestamp: now,
        };
        self.checkpoints.swap_leader(None, &record)?;
        ctx.log.record(
            now,
            ACTOR,
            "bootstrap",
            json!({"leader": election.winner, "masters": self.masters.values().map(|m| json!({"id": m.id, "provider": m.provider, "node": m.node})).collect::<Vec<_>>()}),
        );
        self.sync_state(ctx);
        self.checkpoint_now(ctx)?;
        Ok(Vec::new())
    }

    fn role_state(&self, ctx: &DeployCtx, m: &Master) -> RoleState {
        RoleState {
            master_id: m.id.clone(),
            role: m.role,
            last_heartbeat: m.last_heartbeat,
            reachable_latency: ctx.fabric.probe(m.node),
        }
    }

    /// Mirrors live resources, deployments, routing and roles into the
    /// transactional state.
    pub fn sync_state(&mut self, ctx: &DeployCtx) {
        let mut s = SystemState::default();
        for a in self.deployer.agents().values() {
            if let Ok(n) = ctx.fabric.node(a.node) {
                s.resources.insert(
                    a.node,
                    ResourceEntry {
                        provider: a.provider.clone(),
                        vm_type: a.vm_type,
                        state: n.state,
                        capacity_remaining: a.slots.saturating_sub(a.hosted.len() as u32),
                    },
                );
            }
        }
        for m in self
            .masters
            .values()
            .filter(|m| m.status != MasterStatus::Failed)
        {
            if let Ok(n) = ctx.fabric.node(m.node) {
                s.resources.insert(
                    m.node,
                    ResourceEntry {
                        provider: m.provider.clone(),
                        vm_type: n.vm_type,
                        state: n.state,
                        capacity_remaining: 0,
                    },
                );
            }
            s.roles.insert(
                m.id.clone(),
                RoleState {
                    master_id: m.id.clone(),
                    role: m.role,
                    last_heartbeat: m.last_heartbeat,
                    reachable_latency: Some(
                        ctx.fabric
                            .node(m.node)
                            .map_or(0, |n| n.reachable_latency_ms),
                    ),
                },
            );
        }
        s.deployments = self.deployer.records().clone();
        s.routing_version = ctx.balancer.table.version();
        let target = s.to_kv();
        let current = self.engine.snapshot();
        let mut ops: Vec<Op> = target
            .iter()
            .filter(|(k, v)| current.get(*k) != Some(*v))
            .map(|(k, v)| Op::put(k.clone(), v.clone()))
            .collect();
        ops.extend(
            current
                .keys()
                .filter(|k| !target.contains_key(*k))
                .map(|k| Op::delete(k.clone())),
        );
        if !ops.is_empty() {
            // only fails while intake is paused, and checkpoints resume it
            let _ = self.engine.submit_transaction(ops);
        }
    }

    /// Coordinated checkpoint: pause intake, drain, persist, resume.
    pub fn checkpoint_now(&mut self, ctx: &mut DeployCtx) -> Result<Checkpoint, ControllerError> {
        let now = ctx.fabric.now();
        if self.leader().is_none() {
            return Err(ControllerError::NoLeader);
        }
        self.sync_state(ctx);
        self.engine.pause_intake();
        debug_assert!(
            self.engine.drained(),
            "transactions complete within one event"
        );
        let result = self.checkpoints.save(self.state(), now);
        self.engine.resume_intake();
        match result {
            Ok(cp) => {
                ctx.log.record(
                    now,
                    ACTOR,
                    "checkpoint",
                    json!({"seq": cp.seq, "digest": cp.digest}),
                );
                self.last_checkpoint = Some(cp.clone());
                Ok(cp)
            }
            Err(e) => {
                ctx.log.record(
                    now,
                    ACTOR,
                    "checkpoint_failed",
                    json!({"error": e.to_string()}),
                );
                Err(e.into())
            }
        }
    }

    /// Restores the transactional state to a checkpoint.
    pub fn rollback(&mut self, cp: &Checkpoint) -> Result<SystemState, ControllerError> {
        cp.verify()?;
        self.engine.restore(cp.state.to_kv());
        Ok(self.state())
    }

    pub fn submit_transaction(&mut self, ops: Vec<Op>) -> Result<TxOutcome, TxError> {
        self.engine.submit_transaction(ops)
    }

    fn leader_record(&self) -> Option<LeaderRecord> {
        self.checkpoints.leader().ok().flatten()
    }

    fn bind(&mut self, node: NodeId) {
        if let Some(r) = self.leader_record() {
            self.bindings.insert(node, r.master_id);
        }
    }

    /// Registers a pre-allocated agent node.
    pub fn preallocate(
        &mut self,
        ctx: &mut DeployCtx,
        provider: &str,
        vm: VmType,
    ) -> Result<NodeId, ControllerError> {
        let node = ctx
            .fabric
            .provision_running(provider, vm)
            .map_err(DeployError::from)?;
        self.deployer.adopt_node(ctx.fabric, node)?;
        self.bind(node);
        ctx.log.record(
            ctx.fabric.now(),
            ACTOR,
            "preallocate",
            json!({"node": node, "provider": provider, "vm": vm}),
        );
        self.sync_state(ctx);
        Ok(node)
    }

    /// Plans and starts the initial deployment of an application.
    pub fn deploy_application(
        &mut self,
        ctx: &mut DeployCtx,
        manifest: &ApplicationManifest,
    ) -> Result<(u64, Vec<Effect>), ControllerError> {
        if self.leader().is_none() {
            return Err(ControllerError::NoLeader);
        }
        let registry = ctx.fabric.registry();
        let candidates = validate_constraints(manifest, &registry)?;
        let plan = choose_placement(manifest, &candidates, &registry, &mut self.rng)?;
        let (task, effects) = self.deployer.start_initial(ctx, manifest, plan)?;
        self.tasks.insert(task, PendingTask::Initial);
        let effects = self.absorb(ctx, effects);
        self.sync_state(ctx);
        Ok((task, effects))
    }

    /// Routes deployer effects through controller bookkeeping.
    fn absorb(&mut self, ctx: &mut DeployCtx, effects: Vec<DeployEffect>) -> Vec<Effect> {
        let now = ctx.fabric.now();
        for e in &effects {
            if let DeployEffect::TaskDone { task, ok, .. } = e {
                match self.tasks.remove(task) {
                    Some(PendingTask::Scale(i)) => {
                        let ev = &mut self.scale_events[i];
                        ev.completed_at = Some(now);
                        ev.ok = Some(*ok);
                        let key = (ev.application.clone(), ev.component.clone());
                        self.last_scale.insert(key, now);
                    }
                    Some(PendingTask::Replace(_)) | Some(PendingTask::Initial) | None => {}
                }
            }
            if let DeployEffect::InstanceUp(info) = e {
                if let Some(i) = self.scale_events.iter().rposition(|s| {
                    s.application == info.application
                        && s.component == info.component
                        && s.action == ScaleAction::ScaleOut
                        && s.instance.is_none()
                        && s.completed_at.is_none()
                }) {
                    self.scale_events[i].instance = Some(info.instance.clone());
                    self.scale_events[i].provider = Some(info.provider.clone());
                }
                if !self.bindings.contains_key(&info.node) {
                    self.bind(info.node);
                }
            }
        }
        wrap(effects)
    }

    /// Applies policy to a workload decision or an instance failure.
    pub fn act_on_decision(
        &mut self,
        ctx: &mut DeployCtx,
        decision: Decision,
    ) -> Result<Vec<Effect>, Rejected> {
        let now = ctx.fabric.now();
        let result = self.decide(ctx, &decision);
        match &result {
            Ok(_) => ctx.log.record(
                now,
                ACTOR,
                "decision_accepted",
                serde_json::to_value(&decision).expect("serializable"),
            ),
            Err(r) => ctx.log.record(
                now,
                ACTOR,
                if r.dropped {
                    "decision_dropped"
                } else {
                    "decision_rejected"
                },
                json!({"decision": decision, "reason": r.reason}),
            ),
        }
        self.sync_state(ctx);
        result
    }

    fn decide(
        &mut self,
        ctx: &mut DeployCtx,
        decision: &Decision,
    ) -> Result<Vec<Effect>, Rejected> {
        if self.leader().is_none() || self.election.is_some() {
            return Err(reject("no leader"));
        }
        let now = ctx.fabric.now();
        match decision {
            Decision::ReplaceInstance { instance } => {
                if self
                    .tasks
                    .values()
                    .any(|t| matches!(t, PendingTask::Replace(i) if i == instance))
                {
                    return Err(Rejected {
                        reason: "replacement already running".into(),
                        dropped: true,
                    });
                }
                let (task, effects) = self
                    .deployer
                    .start_replacement(ctx, instance, &mut self.rng)
                    .map_err(|e| reject(e.to_string()))?;
                self.tasks
                    .insert(task, PendingTask::Replace(instance.clone()));
                Ok(self.absorb(ctx, effects))
            }
            Decision::Scale(d) => {
                let manifest = self
                    .deployer
                    .manifest(&d.application)
                    .ok_or_else(|| reject(format!("unknown application `{}`", d.application)))?;
                let spec = manifest
                    .component(&d.component)
                    .ok_or_else(|| reject(format!("unknown component `{}`", d.component)))?;
                let floor = spec.replication() as usize;
                if self.deployer.in_flight(&d.application, &d.component) {
                    return Err(Rejected {
                        reason: "scale action in flight".into(),
                        dropped: true,
                    });
                }
                let key = (d.application.clone(), d.component.clone());
                let event = ScaleEvent {
                    at: now,
                    application: d.application.clone(),
                    component: d.component.clone(),
                    action: d.action,
                    source: d.source.clone(),
                    episode: d.episode,
                    instance: None,
                    provider: None,
                    completed_at: None,
                    ok: None,
                };
                match d.action {
                    ScaleAction::ScaleOut => {
                        let _ = self.checkpoint_now(ctx);
                        let (task, effects) = self
                            .deployer
                            .start_scale_out(ctx, &d.application, &d.component, &mut self.rng)
                            .map_err(|e| reject(e.to_string()))?;
                        self.scale_events.push(event);
                        self.tasks
                            .insert(task, PendingTask::Scale(self.scale_events.len() - 1));
                        Ok(self.absorb(ctx, effects))
                    }
                    ScaleAction::ScaleIn => {
                        let replicas = self
                            .deployer
                            .record(&d.application)
                            .map_or(0, |r| r.plan.replicas_of(&d.component));
                        if replicas <= floor {
                            return Err(reject(format!("replication floor {floor}")));
                        }
                        if self
                            .last_scale
                            .get(&key)
                            .is_some_and(|t| now - *t < self.config.scale_in_cooldown)
                        {
                            return Err(reject("scale-in cooldown"));
                        }
                        let _ = self.checkpoint_now(ctx);
                        let effects = self
                            .deployer
                            .scale_in(ctx, &d.application, &d.component)
                            .map_err(|e| reject(e.to_string()))?;
                        let mut event = event;
                        if let Some(DeployEffect::InstanceDown(i)) = effects.first() {
                            event.instance = Some(i.instance.clone());
                            event.provider = Some(i.provider.clone());
                        }
                        event.completed_at = Some(now);
                        event.ok = Some(true);
                        self.scale_events.push(event);
                        self.last_scale.insert(key, now);
                        Ok(self.absorb(ctx, effects))
                    }
                }
            }
        }
    }

    /// Heartbeat round among masters.
    pub fn heartbeat(&mut self, ctx: &mut DeployCtx) -> Vec<Effect> {
        if self.unavailable || self.election.is_some() {
            return Vec::new();
        }
        let now = ctx.fabric.now();
        let Some(leader) = self.leader().cloned() else {
            return Vec::new();
        };
        let alive = ctx.fabric.probe(leader.node).is_some();
        let m = self.masters.get_mut(&leader.id).expect("leader");
        if alive {
            m.misses = 0;
            m.last_heartbeat = now;
        } else {
            m.misses += 1;
            if m.misses >= self.config.misses_to_fail {
                return self.start_election(ctx, &leader.id);
            }
            return Vec::new();
        }
        let followers: Vec<Master> = self
            .masters
            .values()
            .filter(|m| m.role == Role::Follower && m.status == MasterStatus::Running)
            .cloned()
            .collect();
        let mut effects = Vec::new();
        for f in followers {
            let answered = ctx.fabric.ping(leader.node, f.node).is_some();
            let m = self.masters.get_mut(&f.id).expect("follower");
            if answered {
                m.misses = 0;
                m.last_heartbeat = now;
            } else {
                m.misses += 1;
                if m.misses >= self.config.misses_to_fail {
                    effects.extend(self.follower_failed(ctx, &f.id));
                }
            }
        }
        effects
    }

    fn follower_failed(&mut self, ctx: &mut DeployCtx, id: &str) -> Vec<Effect> {
        let now = ctx.fabric.now();
        let m = self.masters.get_mut(id).expect("master");
        m.status = MasterStatus::Failed;
        let failed = m.clone();
        let report = RecoveryReport::new(
            RecoveryKind::Follower,
            &failed,
            self.injected.get(&failed.node).copied(),
            now,
        );
        self.recoveries.push(report);
        ctx.log.record(
            now,
            ACTOR,
            "follower_failed",
            json!({"master": id, "provider": failed.provider}),
        );
        self.sync_state(ctx);
        vec![Effect::Schedule {
            at: now + self.config.follower_start_delay,
            timer: ControlTimer::FollowerStart {
                replaces: id.to_string(),
            },
        }]
    }

    fn start_election(&mut self, ctx: &mut DeployCtx, failed_id: &str) -> Vec<Effect> {
        let now = ctx.fabric.now();
        let m = self.masters.get_mut(failed_id).expect("master");
        m.status = MasterStatus::Failed;
        let failed = m.clone();
        let mut report = RecoveryReport::new(
            RecoveryKind::Leader,
            &failed,
            self.injected.get(&failed.node).copied(),
            now,
        );
        ctx.log.record(
            now,
            ACTOR,
            "leader_failed",
            json!({"master": failed.id, "provider": failed.provider}),
        );
        let candidates: Vec<RoleState> = self
            .masters
            .values()
            .filter(|m| m.role == Role::Follower && m.status == MasterStatus::Running)
            .map(|m| self.role_state(ctx, m))
            .collect();
        match self.strategy.elect(&candidates) {
            Err(_) => {
                self.unavailable = true;
                report.unavailable = true;
                self.recoveries.push(report);
                ctx.log.record(
                    now,
                    ACTOR,
                    "system_unavailable",
                    json!({"reason": "no reachable master candidate"}),
                );
                Vec::new()
            }
            Ok(e) => {
                report.election_ms = Some(ms(e.duration));
                report.new_leader = Some(e.winner.clone());
                self.recoveries.push(report);
                let idx = self.recoveries.len() - 1;
                self.active_recovery = Some(idx);
                let term = self.term + 1;
                self.election = Some(PendingElection {
                    term,
                    winner: e.winner.clone(),
                    report: idx,
                });
                ctx.log.record(now, ACTOR, "election_started", json!({"term": term, "candidates": e.candidates, "winner": e.winner, "duration_ms": ms(e.duration)}));
                vec![Effect::Schedule {
                    at: now + e.duration,
                    timer: ControlTimer::ElectionComplete { term },
                }]
            }
        }
    }

    pub fn on_timer(&mut self, ctx: &mut DeployCtx, timer: ControlTimer) -> Vec<Effect> {
        let effects = match timer {
            ControlTimer::Deploy(t) => {
                let e = self.deployer.on_timer(ctx, t);
                self.absorb(ctx, e)
            }
            ControlTimer::ElectionComplete { term } => self.complete_election(ctx, term),
            ControlTimer::FollowerStart { replaces } => self.start_warm_follower(ctx, &replaces),
            ControlTimer::MasterStackReady { master } => self.master_ready(ctx, &master),
        };
        self.sync_state(ctx);
        effects
    }

    fn complete_election(&mut self, ctx: &mut DeployCtx, term: u64) -> Vec<Effect> {
        let now = ctx.fabric.now();
        let Some(pending) = self.election.take().filter(|p| p.term == term) else {
            return Vec::new();
        };
        let winner_alive = self
            .masters
            .get(&pending.winner)
            .is_some_and(|m| ctx.fabric.probe(m.node).is_some());
        if !winner_alive {
            // the winner died during the vote: run it again without it
            self.masters
                .get_mut(&pending.winner)
                .expect("winner")
                .status = MasterStatus::Failed;
            self.recoveries.pop();
            self.active_recovery = None;
            return self.start_election(ctx, &pending.winner);
        }
        let previous = self.leader_record();
        for m in self.masters.values_mut() {
            if m.role == Role::Leader {
                m.role = Role::Follower;
            }
        }
        let winner = self.masters.get_mut(&pending.winner).expect("winner");
        winner.role = Role::Leader;
        winner.misses = 0;
        let winner = winner.clone();
        self.term = pending.term;
        let record = LeaderRecord {
            master_id: winner.id.clone(),
            term: self.term,
            timestamp: now,
        };
        if let Err(e) = self.checkpoints.swap_leader(previous.as_ref(), &record) {
            self.recoveries[pending.report].blocked = Some(e.to_string());
            ctx.log.record(
                now,
                ACTOR,
                "recovery_blocked",
                json!({"error": e.to_string()}),
            );
            return Vec::new();
        }
        ctx.log.record(
            now,
            ACTOR,
            "leader_elected",
            json!({"master": winner.id, "term": self.term, "provider": winner.provider}),
        );
        match self.checkpoints.load_latest() {
            Ok(loaded) => {
                for skipped in &loaded.skipped {
                    ctx.log.record(
                        now,
                        ACTOR,
                        "checkpoint_skipped",
                        json!({"error": skipped.to_string()}),
                    );
                }
                let restored = self
                    .rollback(&loaded.checkpoint)
                    .expect("verified checkpoint");
                let report = &mut self.recoveries[pending.report];
                report.restored_checkpoint = Some(loaded.checkpoint.seq);
                report.state_matches_checkpoint = Some(restored == loaded.checkpoint.state);
                ctx.log.record(
                    now,
                    ACTOR,
                    "rollback",
                    json!({"seq": loaded.checkpoint.seq, "digest": loaded.checkpoint.digest}),
                );
            }
            Err(e) => {
                self.recoveries[pending.report].blocked = Some(e.to_string());
                ctx.log.record(
                    now,
                    ACTOR,
                    "recovery_blocked",
                    json!({"error": e.to_string()}),
                );
            }
        }
        // bring the restored view back in line with the live system
        self.sync_state(ctx);
        if self
            .deployer
            .agents()
            .keys()
            .all(|n| !ctx.fabric.is_running(*n))
        {
            self.recoveries[pending.report].agents_rebound_at = Some(now);
        }
        self.deploy_cold_follower(ctx, pending.report)
    }

    /// Providers a new master may use: not hosting a live master and not
    /// known to have failed, lowest latency first.
    fn master_candidates(&self, ctx: &DeployCtx, avoid: &BTreeSet<String>) -> Vec<String> {
        let taken: BTreeSet<&str> = self
            .masters
            .values()
            .filter(|m| m.status != MasterStatus::Failed)
            .map(|m| m.provider.as_str())
            .collect();
        let mut out: Vec<(u64, String)> = ctx
            .fabric
            .providers()
            .filter(|p| {
                !taken.contains(p.id.as_str())
                    && !avoid.contains(&p.id)
                    && !ctx.fabric.provider_failed(&p.id)
            })
            .map(|p| (p.base_latency_ms, p.id.clone()))
            .collect();
        out.sort();
        out.into_iter().map(|(_, id)| id).collect()
    }

    fn deploy_cold_follower(&mut self, ctx: &mut DeployCtx, report: usize) -> Vec<Effect> {
        let now = ctx.fabric.now();
        let avoid = BTreeSet::from([self.recoveries[report].failed_provider.clone()]);
        for provider in self.master_candidates(ctx, &avoid) {
            let Some(vm) = Self::master_vm(ctx, &provider) else {
                continue;
            };
            let Ok(node) = ctx.fabric.provision_node(&provider, vm) else {
                continue;
            };
            let id = self.new_master_id();
            self.masters.insert(
                id.clone(),
                Master {
                    id: id.clone(),
                    node,
                    provider: provider.clone(),
                    role: Role::Follower,
                    status: MasterStatus::Starting,
                    last_heartbeat: now,
                    misses: 0,
                },
            );
            let r = &mut self.recoveries[report];
            r.replacement = Some(id.clone());
            r.replacement_provider = Some(provider.clone());
            ctx.log.record(
                now,
                ACTOR,
                "follower_deploying",
                json!({"master": id, "provider": provider, "node": node}),
            );
            return Vec::new();
        }
        self.recoveries[report].blocked = Some("no provider for a new follower".into());
        ctx.log.record(
            now,
            ACTOR,
            "recovery_blocked",
            json!({"error": "no provider for a new follower"}),
        );
        Vec::new()
    }

    fn start_warm_follower(&mut self, ctx: &mut DeployCtx, replaces: &str) -> Vec<Effect> {
        let now = ctx.fabric.now();
        let Some(idx) = self
            .recoveries
            .iter()
            .rposition(|r| r.kind == RecoveryKind::Follower && r.failed_master == replaces)
        else {
            return Vec::new();
        };
        if self.leader().is_none() {
            self.recoveries[idx].blocked = Some("no leader".into());
            return Vec::new();
        }
        let avoid = BTreeSet::from([self.recoveries[idx].failed_provider.clone()]);
        for provider in self.master_candidates(ctx, &avoid) {
            let Some(vm) = Self::master_vm(ctx, &provider) else {
                continue;
            };
            let Ok(node) = ctx.fabric.provision_running(&provider, vm) else {
                continue;
            };
            let id = self.new_master_id();
            self.masters.insert(
                id.clone(),
                Master {
                    id: id.clone(),
                    node,
                    provider: provider.clone(),
                    role: Role::Follower,
                    status: MasterStatus::Running,
                    last_heartbeat: now,
                    misses: 0,
                },
            );
            let r = &mut self.recoveries[idx];
            r.replacement = Some(id.clone());
            r.replacement_provider = Some(provider.clone());
            r.replacement_ready_at = Some(now);
            r.redeploy_ms = Some(ms(self.config.follower_start_delay));
            r.complete(now);
            ctx.log.record(
                now,
                ACTOR,
                "follower_started",
                json!({"master": id, "provider": provider, "node": node, "replaces": replaces}),
            );
            ctx.log.record(
                now,
                ACTOR,
                "recovery_complete",
                serde_json::to_value(&self.recoveries[idx]).expect("serializable"),
            );
            return Vec::new();
        }
        self.recoveries[idx].blocked = Some("no provider for a new follower".into());
        Vec::new()
    }

    fn master_ready(&mut self, ctx: &mut DeployCtx, master: &str) -> Vec<Effect> {
        let now = ctx.fabric.now();
        let Some(m) = self.masters.get_mut(master) else {
            return Vec::new();
        };
        if m.status != MasterStatus::Starting || !ctx.fabric.is_running(m.node) {
            return Vec::new();
        }
        m.status = MasterStatus::Running;
        m.last_heartbeat = now;
        ctx.log
            .record(now, ACTOR, "follower_ready", json!({"master": master}));
        if let Some(idx) = self.active_recovery {
            let r = &mut self.recoveries[idx];
            if r.replacement.as_deref() == Some(master) {
                r.replacement_ready_at = Some(now);
                let elected =
                    r.detected_at + Duration::from_secs_f64(r.election_ms.unwrap_or(0.0) / 1e3);
                r.redeploy_ms = Some(ms(now - elected));
            }
        }
        self.check_recovery(ctx);
        Vec::new()
    }

    fn check_recovery(&mut self, ctx: &mut DeployCtx) {
        let now = ctx.fabric.now();
        let Some(idx) = self.active_recovery else {
            return;
        };
        let r = &mut self.recoveries[idx];
        if r.replacement_ready_at.is_some() && r.agents_rebound_at.is_some() {
            r.complete(now);
            self.active_recovery = None;
            ctx.log.record(
                now,
                ACTOR,
                "recovery_complete",
                serde_json::to_value(&self.recoveries[idx]).expect("serializable"),
            );
        }
    }

    /// Agents re-read the leader record and rebind.
    pub fn discovery(&mut self, ctx: &mut DeployCtx) {
        let now = ctx.fabric.now();
        let record = match self.checkpoints.leader() {
            Ok(Some(r)) => r,
            Ok(None) => return,
            Err(e) => {
                ctx.log.record(
                    now,
                    ACTOR,
                    "discovery_failed",
                    json!({"error": e.to_string()}),
                );
                return;
            }
        };
        let live: Vec<NodeId> = self
            .deployer
            .agents()
            .keys()
            .copied()
            .filter(|n| ctx.fabric.is_running(*n))
            .collect();
        for node in &live {
            if self.bindings.get(node) != Some(&record.master_id) {
                self.bindings.insert(*node, record.master_id.clone());
                ctx.log.record(
                    now,
                    "agent",
                    "rebound",
                    json!({"node": node, "master": record.master_id, "term": record.term}),
                );
            }
        }
        if let Some(idx) = self.active_recovery {
            let r = &mut self.recoveries[idx];
            if self.election.is_none()
                && r.agents_rebound_at.is_none()
                && r.new_leader.as_deref() == Some(record.master_id.as_str())
            {
                r.agents_rebound_at = Some(now);
                self.check_recovery(ctx);
            }
        }
    }

    /// All live agents are bound to the current leader.
    pub fn agents_bound(&self, ctx: &DeployCtx) -> bool {
        let Some(leader) = self.leader() else {
            return false;
        };
        self.deployer
            .agents()
            .keys()
            .filter(|n| ctx.fabric.is_running(**n))
            .all(|n| self.bindings.get(n) == Some(&leader.id))
    }

    /// Periodic checkpoint by the leader.
    pub fn periodic_checkpoint(&mut self, ctx: &mut DeployCtx) {
        if self.leader().is_some() && self.election.is_none() {
            let _ = self.checkpoint_now(ctx);
        }
    }

    pub fn on_node_running(&mut self, ctx: &mut DeployCtx, node: NodeId) -> Vec<Effect> {
        let now = ctx.fabric.now();
        if let Some(m) = self
            .masters
            .values()
            .find(|m| m.node == node && m.status == MasterStatus::Starting)
        {
            return vec![Effect::Schedule {
                at: now + self.config.master_stack_deploy,
                timer: ControlTimer::MasterStackReady {
                    master: m.id.clone(),
                },
            }];
        }
        let e = self.deployer.on_node_running(ctx, node);
        if self.deployer.agents().contains_key(&node) {
            self.bind(node);
        }
        let out = self.absorb(ctx, e);
        self.sync_state(ctx);
        out
    }

    pub fn on_node_failed(&mut self, ctx: &mut DeployCtx, node: NodeId) -> Vec<Effect> {
        if self.master_node(node).is_some() {
            // masters are detected by heartbeats
            return Vec::new();
        }
        let (_, e) = self.deployer.on_node_failed(ctx, node);
        self.bindings.remove(&node);
        let out = self.absorb(ctx, e);
        self.sync_state(ctx);
        out
    }
}

pub fn task_kind_label(kind: &TaskKind) -> &'static str {
    match kind {
        TaskKind::Initial => "initial",
        TaskKind::ScaleOut => "scale_out",
        TaskKind::Replace { .. } => "replace",
    }
}
