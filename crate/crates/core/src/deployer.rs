//! The service deployer: constraint validation, seeded lowest-price
//! placement, and the phased deployment sequence (node provisioning,
//! platform install, application deploy) run as timers on the event loop.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::balancer::{LoadBalancer, RouteEntry};
use crate::fabric::{Fabric, FabricError, NodeId, ProviderProfile, SimClock, VmType};
use crate::log::EventLog;
use crate::manifest::{ApplicationManifest, ComponentSpec};
use crate::SimTime;

pub const DEFAULT_PLATFORM_INSTALL: Duration = Duration::ZERO;
pub const DEFAULT_APP_DEPLOY: Duration = Duration::from_secs(4);
pub const DEFAULT_TIMEOUT_FACTOR: u32 = 5;

const ACTOR: &str = "deployer";

/// Component name to the sorted ids of the providers able to host it.
pub type CandidateSets = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DeployError {
    #[error("provider registry is empty")]
    EmptyRegistry,
    #[error("component `{component}`: no provider satisfies {constraint}")]
    Unsatisfiable {
        component: String,
        constraint: String,
    },
    #[error("component `{component}`: replication {replication} exceeds {candidates} candidate provider(s)")]
    ReplicationExceedsCandidates {
        component: String,
        replication: u32,
        candidates: usize,
    },
    #[error("unknown application `{0}`")]
    UnknownApplication(String),
    #[error("unknown component `{component}` in application `{application}`")]
    UnknownComponent {
        application: String,
        component: String,
    },
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("application `{0}` is already deployed")]
    AlreadyDeployed(String),
    #[error("no provider can host another `{component}` replica")]
    NoCandidate { component: String },
    #[error("deployment of `{application}` failed: {reason}")]
    Failed { application: String, reason: String },
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

/// One replica assigned to a provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub component: String,
    pub replica: u32,
    pub provider: String,
    pub vm_type: VmType,
    pub price: f64,
    /// Why this provider: constraint matched and price used.
    pub note: String,
}

impl Placement {
    pub fn key(&self) -> String {
        format!("{}#{}", self.component, self.replica)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub application: String,
    pub placements: Vec<Placement>,
}

impl DeploymentPlan {
    pub fn replicas_of(&self, component: &str) -> usize {
        self.placements
            .iter()
            .filter(|p| p.component == component)
            .count()
    }

    pub fn providers_of(&self, component: &str) -> BTreeSet<&str> {
        self.placements
            .iter()
            .filter(|p| p.component == component)
            .map(|p| p.provider.as_str())
            .collect()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeploymentStatus {
    Validating,
    Provisioning,
    Deploying,
    Active,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseStamp {
    pub status: DeploymentStatus,
    pub at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentRecord {
    pub plan: DeploymentPlan,
    /// Placement key to live instance id.
    pub instances: BTreeMap<String, String>,
    pub status: DeploymentStatus,
    pub phases: Vec<PhaseStamp>,
}

impl DeploymentRecord {
    fn new(plan: DeploymentPlan, at: SimTime) -> Self {
        DeploymentRecord {
            plan,
            instances: BTreeMap::new(),
            status: DeploymentStatus::Validating,
            phases: vec![PhaseStamp {
                status: DeploymentStatus::Validating,
                at,
            }],
        }
    }

    /// Moves forward, or from active back to deploying for a replacement.
    fn transition(&mut self, to: DeploymentStatus, at: SimTime) {
        let allowed = to > self.status
            || (self.status == DeploymentStatus::Active && to == DeploymentStatus::Deploying);
        if allowed {
            self.status = to;
            self.phases.push(PhaseStamp { status: to, at });
        }
    }

    pub fn instance_ids(&self) -> impl Iterator<Item = &String> {
        self.instances.values()
    }
}

/// Providers that can host `component`, sorted by id.
fn candidates_for(
    component: &ComponentSpec,
    registry: &[ProviderProfile],
) -> Result<Vec<String>, DeployError> {
    let vm = component.vm_type();
    let located: Vec<&ProviderProfile> = registry
        .iter()
        .filter(|p| component.location().is_none_or(|l| p.matches_location(l)))
        .collect();
    if located.is_empty() {
        return Err(DeployError::Unsatisfiable {
            component: component.name.clone(),
            constraint: format!("location={}", component.location().unwrap_or_default()),
        });
    }
    let mut out: Vec<String> = located
        .iter()
        .filter(|p| p.offers(vm))
        .map(|p| p.id.clone())
        .collect();
    if out.is_empty() {
        let constraint = match component.location() {
            Some(l) => format!("location={l} with vm={vm}"),
            None => format!("vm={vm}"),
        };
        return Err(DeployError::Unsatisfiable {
            component: component.name.clone(),
            constraint,
        });
    }
    out.sort();
    Ok(out)
}

/// Per-component candidate providers satisfying `location` and `vm`.
pub fn validate_constraints(
    manifest: &ApplicationManifest,
    registry: &[ProviderProfile],
) -> Result<CandidateSets, DeployError> {
    if registry.is_empty() {
        return Err(DeployError::EmptyRegistry);
    }
    let mut sets = CandidateSets::new();
    for c in &manifest.components {
        let candidates = candidates_for(c, registry)?;
        if (candidates.len() as u64) < c.replication() as u64 {
            return Err(DeployError::ReplicationExceedsCandidates {
                component: c.name.clone(),
                replication: c.replication(),
                candidates: candidates.len(),
            });
        }
        sets.insert(c.name.clone(), candidates);
    }
    Ok(sets)
}

/// Restricts `pool` to the lowest price for `vm` and picks one uniformly.
fn pick_cheapest(
    pool: &[&ProviderProfile],
    vm: VmType,
    rng: &mut ChaCha8Rng,
) -> Option<(String, f64, usize)> {
    let min = pool
        .iter()
        .filter_map(|p| p.price_of(vm))
        .fold(f64::INFINITY, f64::min);
    let cheapest: Vec<&&ProviderProfile> = pool
        .iter()
        .filter(|p| p.price_of(vm) == Some(min))
        .collect();
    if cheapest.is_empty() {
        return None;
    }
    let i = rng.gen_range(0..cheapest.len());
    Some((cheapest[i].id.clone(), min, cheapest.len()))
}

fn placement_note(component: &ComponentSpec, price: f64, tied: usize) -> String {
    let matched = match component.location() {
        Some(l) => format!("location={l}, vm={}", component.vm_type()),
        None => format!("vm={}", component.vm_type()),
    };
    format!("{matched}; lowest price {price}/h among {tied}")
}

/// Chooses one provider per replica: lowest price for the component's VM
/// type first, then a seeded uniform pick. Replicas of a component never
/// share a provider.
pub fn choose_placement(
    manifest: &ApplicationManifest,
    candidates: &CandidateSets,
    registry: &[ProviderProfile],
    rng: &mut ChaCha8Rng,
) -> Result<DeploymentPlan, DeployError> {
    let by_id: BTreeMap<&str, &ProviderProfile> =
        registry.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut placements = Vec::new();
    for c in &manifest.components {
        let vm = c.vm_type();
        let mut used = BTreeSet::new();
        for replica in 0..c.replication() {
            let pool: Vec<&ProviderProfile> = candidates
                .get(&c.name)
                .into_iter()
                .flatten()
                .filter(|id| !used.contains(id.as_str()))
                .filter_map(|id| by_id.get(id.as_str()).copied())
                .collect();
            let (provider, price, tied) = pick_cheapest(&pool, vm, rng).ok_or_else(|| {
                DeployError::ReplicationExceedsCandidates {
                    component: c.name.clone(),
                    replication: c.replication(),
                    candidates: used.len(),
                }
            })?;
            used.insert(provider.clone());
            placements.push(Placement {
                component: c.name.clone(),
                replica,
                provider,
                vm_type: vm,
                price,
                note: placement_note(c, price, tied),
            });
        }
    }
    Ok(DeploymentPlan {
        application: manifest.name.clone(),
        placements,
    })
}

/// One more placement for `component`, preferring providers it does not
/// use yet and skipping `excluded` ones.
pub fn choose_additional(
    component: &ComponentSpec,
    registry: &[ProviderProfile],
    in_use: &BTreeSet<String>,
    excluded: &BTreeSet<String>,
    replica: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Placement, DeployError> {
    let no_candidate = || DeployError::NoCandidate {
        component: component.name.clone(),
    };
    let candidates = candidates_for(component, registry).map_err(|_| no_candidate())?;
    let usable: Vec<&ProviderProfile> = registry
        .iter()
        .filter(|p| candidates.contains(&p.id) && !excluded.contains(&p.id))
        .collect();
    let fresh: Vec<&ProviderProfile> = usable
        .iter()
        .copied()
        .filter(|p| !in_use.contains(&p.id))
        .collect();
    let pool = if fresh.is_empty() { usable } else { fresh };
    let vm = component.vm_type();
    let (provider, price, tied) = pick_cheapest(&pool, vm, rng).ok_or_else(no_candidate)?;
    Ok(Placement {
        component: component.name.clone(),
        replica,
        provider,
        vm_type: vm,
        price,
        note: placement_note(component, price, tied),
    })
}

/// Routing key: the application name for its entry component, so client
/// traffic addresses the application; `app/component` otherwise.
pub fn route_key(manifest: &ApplicationManifest, component: &str) -> String {
    if manifest.entry_component().name == component {
        manifest.name.clone()
    } else {
        format!("{}/{component}", manifest.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeployerConfig {
    pub platform_install: Duration,
    pub app_deploy: Duration,
    /// A phase times out after this multiple of the longer of the
    /// provider's provision delay and the phase's own delay.
    pub timeout_factor: u32,
}

impl Default for DeployerConfig {
    fn default() -> Self {
        DeployerConfig {
            platform_install: DEFAULT_PLATFORM_INSTALL,
            app_deploy: DEFAULT_APP_DEPLOY,
            timeout_factor: DEFAULT_TIMEOUT_FACTOR,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    NodeProvisioning,
    PlatformInstall,
    AppDeploy,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimerKind {
    Complete,
    Timeout,
}

/// A timer the event loop must deliver back through [`Deployer::on_timer`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeployTimer {
    pub task: u64,
    pub slot: usize,
    pub phase: Phase,
    pub kind: TimerKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Initial,
    ScaleOut,
    Replace { old_instance: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub application: String,
    pub component: String,
    pub instance: String,
    pub node: NodeId,
    pub provider: String,
    pub route: String,
}

/// What the event loop has to act on after a deployer call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum DeployEffect {
    Schedule {
        at: SimTime,
        timer: DeployTimer,
    },
    /// Registered with the balancer and serving.
    InstanceUp(InstanceInfo),
    /// Deregistered and stopped.
    InstanceDown(InstanceInfo),
    TaskDone {
        task: u64,
        application: String,
        component: Option<String>,
        kind: TaskKind,
        ok: bool,
        reason: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentNode {
    pub node: NodeId,
    pub provider: String,
    pub vm_type: VmType,
    pub slots: u32,
    pub preallocated: bool,
    /// (application, component, instance)
    pub hosted: Vec<(String, String, String)>,
}

impl AgentNode {
    fn free(&self) -> bool {
        (self.hosted.len() as u32) < self.slots
    }

    fn hosts_component(&self, application: &str, component: &str) -> bool {
        self.hosted
            .iter()
            .any(|(a, c, _)| a == application && c == component)
    }
}

#[derive(Debug, Clone)]
struct Slot {
    placement: Placement,
    instance: String,
    route: String,
    node: Option<NodeId>,
    fresh_node: bool,
    phase: Phase,
    done: bool,
}

#[derive(Debug, Clone)]
struct Task {
    id: u64,
    application: String,
    component: Option<String>,
    kind: TaskKind,
    slots: Vec<Slot>,
}

/// Owns deployment records and agent nodes; drives tasks through phases.
#[derive(Debug, Clone, Default)]
pub struct Deployer {
    config: DeployerConfig,
    records: BTreeMap<String, DeploymentRecord>,
    manifests: BTreeMap<String, ApplicationManifest>,
    agents: BTreeMap<NodeId, AgentNode>,
    tasks: BTreeMap<u64, Task>,
    next_task: u64,
    counters: BTreeMap<(String, String), u32>,
}

/// Mutable world state a deployer call operates on.
pub struct DeployCtx<'a> {
    pub fabric: &'a mut Fabric,
    pub balancer: &'a mut LoadBalancer,
    pub log: &'a mut EventLog,
}

impl Deployer {
    pub fn new(config: DeployerConfig) -> Self {
        Deployer {
            config,
            next_task: 1,
            ..Default::default()
        }
    }

    pub fn config(&self) -> &DeployerConfig {
        &self.config
    }

    pub fn record(&self, application: &str) -> Option<&DeploymentRecord> {
        self.records.get(application)
    }

    pub fn records(&self) -> &BTreeMap<String, DeploymentRecord> {
        &self.records
    }

    pub fn manifest(&self, application: &str) -> Option<&ApplicationManifest> {
        self.manifests.get(application)
    }

    pub fn agents(&self) -> &BTreeMap<NodeId, AgentNode> {
        &self.agents
    }

    /// Restores records from a checkpoint.
    pub fn restore_records(&mut self, records: BTreeMap<String, DeploymentRecord>) {
        self.records = records;
    }

    pub fn in_flight(&self, application: &str, component: &str) -> bool {
        self.tasks.values().any(|t| {
            t.application == application
                && (t.component.is_none() || t.component.as_deref() == Some(component))
        })
    }

    pub fn busy(&self) -> bool {
        !self.tasks.is_empty()
    }

    /// Live instances of a component, oldest first.
    pub fn instances_of(&self, application: &str, component: &str) -> Vec<InstanceInfo> {
        let mut out: Vec<InstanceInfo> = self
            .agents
            .values()
            .flat_map(|a| {
                a.hosted
                    .iter()
                    .filter(|(app, c, _)| app == application && c == component)
                    .map(|(app, c, i)| InstanceInfo {
                        application: app.clone(),
                        component: c.clone(),
                        instance: i.clone(),
                        node: a.node,
                        provider: a.provider.clone(),
                        route: self
                            .manifests
                            .get(app)
                            .map_or_else(|| app.clone(), |m| route_key(m, c)),
                    })
            })
            .collect();
        out.sort_by_key(|i| instance_ordinal(&i.instance));
        out
    }

    pub fn find_instance(&self, instance: &str) -> Option<InstanceInfo> {
        let (app, component, _) = split_instance(instance)?;
        self.instances_of(app, component)
            .into_iter()
            .find(|i| i.instance == instance)
    }

    /// Registers an already running node as an agent host.
    pub fn adopt_node(&mut self, fabric: &Fabric, node: NodeId) -> Result<(), DeployError> {
        let n = fabric.node(node)?;
        let slots = fabric
            .provider(&n.provider)?
            .vm_catalog
            .get(&n.vm_type)
            .map_or(1, |o| o.vcpu.max(1));
        self.agents.insert(
            node,
            AgentNode {
                node,
                provider: n.provider.clone(),
                vm_type: n.vm_type,
                slots,
                preallocated: true,
                hosted: vec![],
            },
        );
        Ok(())
    }

    fn next_instance_id(&mut self, application: &str, component: &str) -> String {
        let n = self
            .counters
            .entry((application.to_string(), component.to_string()))
            .or_insert(0);
        *n += 1;
        format!("{application}/{component}/{n}")
    }

    fn new_slot(&mut self, manifest: &ApplicationManifest, placement: Placement) -> Slot {
        let instance = self.next_instance_id(&manifest.name, &placement.component);
        Slot {
            route: route_key(manifest, &placement.component),
            placement,
            instance,
            node: None,
            fresh_node: false,
            phase: Phase::NodeProvisioning,
            done: false,
        }
    }

    /// Starts the initial deployment of an application.
    pub fn start_initial(
        &mut self,
        ctx: &mut DeployCtx,
        manifest: &ApplicationManifest,
        plan: DeploymentPlan,
    ) -> Result<(u64, Vec<DeployEffect>), DeployError> {
        if self
            .records
            .get(&manifest.name)
            .is_some_and(|r| r.status != DeploymentStatus::Failed)
        {
            return Err(DeployError::AlreadyDeployed(manifest.name.clone()));
        }
        let now = ctx.fabric.now();
        self.manifests
            .insert(manifest.name.clone(), manifest.clone());
        let mut record = DeploymentRecord::new(plan.clone(), now);
        ctx.log.record(
            now,
            ACTOR,
            "plan",
            serde_json::to_value(&plan).expect("serializable"),
        );
        let slots: Vec<Slot> = plan
            .placements
            .iter()
            .map(|p| self.new_slot(manifest, p.clone()))
            .collect();
        let id = self.add_task(manifest.name.clone(), None, TaskKind::Initial, slots);
        let effects = self.begin(ctx, id);
        let provisioning = self
            .tasks
            .get(&id)
            .is_some_and(|t| t.slots.iter().any(|s| s.phase == Phase::NodeProvisioning));
        record.transition(
            if provisioning {
                DeploymentStatus::Provisioning
            } else {
                DeploymentStatus::Deploying
            },
            now,
        );
        self.records.insert(manifest.name.clone(), record);
        Ok((id, effects))
    }

    /// Adds one replica of `component` on a new placement.
    pub fn start_scale_out(
        &mut self,
        ctx: &mut DeployCtx,
        application: &str,
        component: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<(u64, Vec<DeployEffect>), DeployError> {
        let placement = self.extra_placement(ctx.fabric, application, component, None, rng)?;
        self.start_single(ctx, application, placement, TaskKind::ScaleOut)
    }

    /// Deploys a replacement for a lost instance, keeping its replica index.
    pub fn start_replacement(
        &mut self,
        ctx: &mut DeployCtx,
        old_instance: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<(u64, Vec<DeployEffect>), DeployError> {
        let (application, component, _) = split_instance(old_instance)
            .ok_or_else(|| DeployError::UnknownInstance(old_instance.to_string()))?;
        let (application, component) = (application.to_string(), component.to_string());
        let record = self
            .records
            .get(&application)
            .ok_or_else(|| DeployError::UnknownApplication(application.clone()))?;
        let key = record
            .instances
            .iter()
            .find(|(_, i)| *i == old_instance)
            .map(|(k, _)| k.clone())
            .ok_or_else(|| DeployError::UnknownInstance(old_instance.to_string()))?;
        let placement =
            self.extra_placement(ctx.fabric, &application, &component, Some(&key), rng)?;
        self.start_single(
            ctx,
            &application,
            placement,
            TaskKind::Replace {
                old_instance: old_instance.to_string(),
            },
        )
    }

    fn extra_placement(
        &self,
        fabric: &Fabric,
        application: &str,
        component: &str,
        replacing: Option<&str>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Placement, DeployError> {
        let manifest = self
            .manifests
            .get(application)
            .ok_or_else(|| DeployError::UnknownApplication(application.into()))?;
        let spec = manifest
            .component(component)
            .ok_or_else(|| DeployError::UnknownComponent {
                application: application.into(),
                component: component.into(),
            })?;
        let record = &self.records[application];
        let in_use: BTreeSet<String> = record
            .plan
            .placements
            .iter()
            .filter(|p| p.component == component && Some(p.key().as_str()) != replacing)
            .map(|p| p.provider.clone())
            .collect();
        let excluded: BTreeSet<String> = fabric
            .providers()
            .filter(|p| fabric.provider_failed(&p.id))
            .map(|p| p.id.clone())
            .collect();
        let replica =
            match replacing.and_then(|k| record.plan.placements.iter().find(|p| p.key() == k)) {
                Some(p) => p.replica,
                None => record
                    .plan
                    .placements
                    .iter()
                    .filter(|p| p.component == component)
                    .map(|p| p.replica + 1)
                    .max()
                    .unwrap_or(0),
            };
        choose_additional(spec, &fabric.registry(), &in_use, &excluded, replica, rng)
    }

    fn start_single(
        &mut self,
        ctx: &mut DeployCtx,
        application: &str,
        placement: Placement,
        kind: TaskKind,
    ) -> Result<(u64, Vec<DeployEffect>), DeployError> {
        let manifest = self.manifests[application].clone();
        let now = ctx.fabric.now();
        ctx.log.record(
            now,
            ACTOR,
            "placement",
            json!({"application": application, "kind": kind, "placement": placement}),
        );
        let component = placement.component.clone();
        let slot = self.new_slot(&manifest, placement);
        let id = self.add_task(application.to_string(), Some(component), kind, vec![slot]);
        if let Some(r) = self.records.get_mut(application) {
            r.transition(DeploymentStatus::Deploying, now);
        }
        Ok((id, self.begin(ctx, id)))
    }

    fn add_task(
        &mut self,
        application: String,
        component: Option<String>,
        kind: TaskKind,
        slots: Vec<Slot>,
    ) -> u64 {
        let id = self.next_task;
        self.next_task += 1;
        self.tasks.insert(
            id,
            Task {
                id,
                application,
                component,
                kind,
                slots,
            },
        );
        id
    }

    /// Picks a reusable agent node or provisions a fresh one per slot.
    fn begin(&mut self, ctx: &mut DeployCtx, task_id: u64) -> Vec<DeployEffect> {
        let mut effects = Vec::new();
        let now = ctx.fabric.now();
        let n = self.tasks[&task_id].slots.len();
        for i in 0..n {
            let (app, placement) = {
                let s = &self.tasks[&task_id].slots[i];
                (
                    self.tasks[&task_id].application.clone(),
                    s.placement.clone(),
                )
            };
            let reusable = self.agents.values().find(|a| {
                a.provider == placement.provider
                    && a.vm_type == placement.vm_type
                    && a.free()
                    && !a.hosts_component(&app, &placement.component)
                    && ctx.fabric.is_running(a.node)
            });
            if let Some(agent) = reusable {
                let node = agent.node;
                self.reserve(
                    node,
                    &app,
                    &placement.component,
                    &self.tasks[&task_id].slots[i].instance.clone(),
                );
                let slot = &mut self.tasks.get_mut(&task_id).expect("task").slots[i];
                slot.node = Some(node);
                effects.extend(self.enter_phase(ctx, task_id, i, Phase::AppDeploy, now));
                continue;
            }
            match ctx
                .fabric
                .provision_node(&placement.provider, placement.vm_type)
            {
                Ok(node) => {
                    let slots = ctx
                        .fabric
                        .provider(&placement.provider)
                        .ok()
                        .and_then(|p| p.vm_catalog.get(&placement.vm_type))
                        .map_or(1, |o| o.vcpu.max(1));
                    self.agents.insert(
                        node,
                        AgentNode {
                            node,
                            provider: placement.provider.clone(),
                            vm_type: placement.vm_type,
                            slots,
                            preallocated: false,
                            hosted: vec![],
                        },
                    );
                    let instance = self.tasks[&task_id].slots[i].instance.clone();
                    self.reserve(node, &app, &placement.component, &instance);
                    let slot = &mut self.tasks.get_mut(&task_id).expect("task").slots[i];
                    slot.node = Some(node);
                    slot.fresh_node = true;
                    ctx.log.record(now, ACTOR, "provision", json!({"node": node, "provider": placement.provider, "vm": placement.vm_type, "instance": instance}));
                    effects.extend(self.enter_phase(ctx, task_id, i, Phase::NodeProvisioning, now));
                }
                Err(e) => {
                    effects.extend(self.fail_task(
                        ctx,
                        task_id,
                        format!("provisioning failed: {e}"),
                    ));
                    return effects;
                }
            }
        }
        effects
    }

    fn reserve(&mut self, node: NodeId, application: &str, component: &str, instance: &str) {
        if let Some(a) = self.agents.get_mut(&node) {
            a.hosted.push((
                application.to_string(),
                component.to_string(),
                instance.to_string(),
            ));
        }
    }

    fn phase_delay(&self, fabric: &Fabric, provider: &str, phase: Phase) -> (Duration, Duration) {
        let provision = fabric.provider(provider).map_or(Duration::ZERO, |p| {
            Duration::from_millis(p.provision_delay_ms)
        });
        let own = match phase {
            Phase::NodeProvisioning => provision,
            Phase::PlatformInstall => self.config.platform_install,
            Phase::AppDeploy => self.config.app_deploy,
        };
        (own, provision.max(own) * self.config.timeout_factor)
    }

    fn enter_phase(
        &mut self,
        ctx: &mut DeployCtx,
        task: u64,
        slot: usize,
        phase: Phase,
        now: SimTime,
    ) -> Vec<DeployEffect> {
        let provider = {
            let s = &mut self.tasks.get_mut(&task).expect("task").slots[slot];
            s.phase = phase;
            s.placement.provider.clone()
        };
        let (own, timeout) = self.phase_delay(ctx.fabric, &provider, phase);
        let mut out = vec![DeployEffect::Schedule {
            at: now + timeout,
            timer: DeployTimer {
                task,
                slot,
                phase,
                kind: TimerKind::Timeout,
            },
        }];
        // provisioning completes on the fabric's own notice
        if phase != Phase::NodeProvisioning {
            out.push(DeployEffect::Schedule {
                at: now + own,
                timer: DeployTimer {
                    task,
                    slot,
                    phase,
                    kind: TimerKind::Complete,
                },
            });
        }
        out
    }

    pub fn on_timer(&mut self, ctx: &mut DeployCtx, timer: DeployTimer) -> Vec<DeployEffect> {
        let now = ctx.fabric.now();
        let Some(task) = self.tasks.get(&timer.task) else {
            return Vec::new();
        };
        let Some(slot) = task.slots.get(timer.slot) else {
            return Vec::new();
        };
        if slot.done || slot.phase != timer.phase {
            return Vec::new();
        }
        if timer.kind == TimerKind::Timeout {
            return self.fail_task(ctx, timer.task, format!("{:?} timed out", timer.phase));
        }
        let node = slot.node.expect("slot has node");
        if !ctx.fabric.is_running(node) {
            return self.fail_task(
                ctx,
                timer.task,
                format!("{node} lost during {:?}", timer.phase),
            );
        }
        match timer.phase {
            Phase::NodeProvisioning => Vec::new(),
            Phase::PlatformInstall => {
                self.enter_phase(ctx, timer.task, timer.slot, Phase::AppDeploy, now)
            }
            Phase::AppDeploy => {
                self.tasks.get_mut(&timer.task).expect("task").slots[timer.slot].done = true;
                self.maybe_complete(ctx, timer.task)
            }
        }
    }

    pub fn on_node_running(&mut self, ctx: &mut DeployCtx, node: NodeId) -> Vec<DeployEffect> {
        let now = ctx.fabric.now();
        let waiting: Vec<(u64, usize)> = self
            .tasks
            .values()
            .flat_map(|t| {
                t.slots
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.node == Some(node) && s.phase == Phase::NodeProvisioning)
                    .map(move |(i, _)| (t.id, i))
            })
            .collect();
        let mut out = Vec::new();
        for (task, slot) in waiting {
            out.extend(self.enter_phase(ctx, task, slot, Phase::PlatformInstall, now));
            self.update_initial_status(task, now);
        }
        out
    }

    /// Handles a node loss: tasks using it fail and the instances it hosted
    /// are returned so the controller can replace them.
    pub fn on_node_failed(
        &mut self,
        ctx: &mut DeployCtx,
        node: NodeId,
    ) -> (Vec<InstanceInfo>, Vec<DeployEffect>) {
        let affected: Vec<u64> = self
            .tasks
            .values()
            .filter(|t| t.slots.iter().any(|s| s.node == Some(node)))
            .map(|t| t.id)
            .collect();
        let mut effects = Vec::new();
        for t in affected {
            effects.extend(self.fail_task(ctx, t, format!("{node} failed")));
        }
        let lost = match self.agents.get(&node) {
            Some(a) => a
                .hosted
                .iter()
                .filter(|(app, _, inst)| {
                    self.records
                        .get(app)
                        .is_some_and(|r| r.instances.values().any(|i| i == inst))
                })
                .map(|(app, c, inst)| InstanceInfo {
                    application: app.clone(),
                    component: c.clone(),
                    instance: inst.clone(),
                    node,
                    provider: a.provider.clone(),
                    route: self
                        .manifests
                        .get(app)
                        .map_or_else(|| app.clone(), |m| route_key(m, c)),
                })
                .collect(),
            None => Vec::new(),
        };
        (lost, effects)
    }

    fn update_initial_status(&mut self, task: u64, now: SimTime) {
        let Some(t) = self.tasks.get(&task) else {
            return;
        };
        if t.kind != TaskKind::Initial {
            return;
        }
        if t.slots.iter().all(|s| s.phase != Phase::NodeProvisioning) {
            if let Some(r) = self.records.get_mut(&t.application) {
                r.transition(DeploymentStatus::Deploying, now);
            }
        }
    }

    fn maybe_complete(&mut self, ctx: &mut DeployCtx, task_id: u64) -> Vec<DeployEffect> {
        if !self.tasks[&task_id].slots.iter().all(|s| s.done) {
            return Vec::new();
        }
        let task = self.tasks.remove(&task_id).expect("task");
        let now = ctx.fabric.now();
        let mut out = Vec::new();
        if let TaskKind::Replace { old_instance } = &task.kind {
            out.extend(self.remove_instance(ctx, old_instance));
        }
        let record = self.records.get_mut(&task.application).expect("record");
        for slot in &task.slots {
            let node = slot.node.expect("node");
            let provider = slot.placement.provider.clone();
            let key = slot.placement.key();
            match record.plan.placements.iter_mut().find(|p| p.key() == key) {
                Some(p) => *p = slot.placement.clone(),
                None => record.plan.placements.push(slot.placement.clone()),
            }
            record.instances.insert(key, slot.instance.clone());
            let _ = ctx.fabric.host_instance(node, &slot.instance);
            ctx.balancer.table.register(
                &slot.route,
                RouteEntry {
                    instance: slot.instance.clone(),
                    node,
                    provider: provider.clone(),
                    healthy: true,
                },
            );
            let info = InstanceInfo {
                application: task.application.clone(),
                component: slot.placement.component.clone(),
                instance: slot.instance.clone(),
                node,
                provider,
                route: slot.route.clone(),
            };
            ctx.log.record(
                now,
                ACTOR,
                "instance_up",
                serde_json::to_value(&info).expect("serializable"),
            );
            out.push(DeployEffect::InstanceUp(info));
        }
        record.transition(DeploymentStatus::Active, now);
        ctx.log.record(now, ACTOR, "task_done", json!({"task": task.id, "application": task.application, "kind": task.kind, "status": "active"}));
        out.push(DeployEffect::TaskDone {
            task: task.id,
            application: task.application,
            component: task.component,
            kind: task.kind,
            ok: true,
            reason: None,
        });
        out
    }

    /// Rolls back a task: its reservations are released and the nodes it
    /// provisioned are terminated. An initial deploy leaves no instance.
    fn fail_task(
        &mut self,
        ctx: &mut DeployCtx,
        task_id: u64,
        reason: String,
    ) -> Vec<DeployEffect> {
        let Some(task) = self.tasks.remove(&task_id) else {
            return Vec::new();
        };
        let now = ctx.fabric.now();
        for slot in &task.slots {
            let Some(node) = slot.node else { continue };
            ctx.fabric.unhost_instance(node, &slot.instance);
            if let Some(a) = self.agents.get_mut(&node) {
                a.hosted.retain(|(_, _, i)| i != &slot.instance);
            }
            if slot.fresh_node && self.agents.get(&node).is_some_and(|a| a.hosted.is_empty()) {
                let _ = ctx.fabric.terminate(node);
                self.agents.remove(&node);
            }
        }
        if let Some(r) = self.records.get_mut(&task.application) {
            if task.kind == TaskKind::Initial {
                r.transition(DeploymentStatus::Failed, now);
            } else {
                r.transition(DeploymentStatus::Active, now);
            }
        }
        ctx.log.record(
            now,
            ACTOR,
            "task_failed",
            json!({"task": task.id, "application": task.application, "kind": task.kind, "reason": reason}),
        );
        vec![DeployEffect::TaskDone {
            task: task.id,
            application: task.application,
            component: task.component,
            kind: task.kind,
            ok: false,
            reason: Some(reason),
        }]
    }

    /// Deregisters then stops an instance, terminating its node once it is
    /// empty unless the node was pre-allocated.
    fn remove_instance(&mut self, ctx: &mut DeployCtx, instance: &str) -> Vec<DeployEffect> {
        let Some(info) = self.find_instance(instance) else {
            return Vec::new();
        };
        let _ = ctx.balancer.table.deregister(instance);
        ctx.fabric.unhost_instance(info.node, instance);
        if let Some(a) = self.agents.get_mut(&info.node) {
            a.hosted.retain(|(_, _, i)| i != instance);
            if a.hosted.is_empty() && !a.preallocated {
                let _ = ctx.fabric.terminate(info.node);
                self.agents.remove(&info.node);
            }
        }
        if let Some(r) = self.records.get_mut(&info.application) {
            r.instances.retain(|_, i| i != instance);
        }
        ctx.log.record(
            ctx.fabric.now(),
            ACTOR,
            "instance_down",
            serde_json::to_value(&info).expect("serializable"),
        );
        vec![DeployEffect::InstanceDown(info)]
    }

    /// Removes the newest replica of a component and its placement.
    pub fn scale_in(
        &mut self,
        ctx: &mut DeployCtx,
        application: &str,
        component: &str,
    ) -> Result<Vec<DeployEffect>, DeployError> {
        let record = self
            .records
            .get(application)
            .ok_or_else(|| DeployError::UnknownApplication(application.into()))?;
        let newest = record
            .plan
            .placements
            .iter()
            .filter(|p| p.component == component)
            .max_by_key(|p| p.replica)
            .ok_or_else(|| DeployError::UnknownComponent {
                application: application.into(),
                component: component.into(),
            })?
            .key();
        let instance = record.instances.get(&newest).cloned();
        let effects = match instance {
            Some(i) => self.remove_instance(ctx, &i),
            None => Vec::new(),
        };
        if let Some(r) = self.records.get_mut(application) {
            r.plan.placements.retain(|p| p.key() != newest);
            r.instances.remove(&newest);
        }
        Ok(effects)
    }
}

fn split_instance(instance: &str) -> Option<(&str, &str, &str)> {
    let mut it = instance.rsplitn(3, '/');
    let n = it.next()?;
    let component = it.next()?;
    let app = it.next()?;
    Some((app, component, n))
}

fn instance_ordinal(instance: &str) -> u32 {
    split_instance(instance)
        .and_then(|(_, _, n)| n.parse().ok())
        .unwrap_or(0)
}

/// Runs a plan to completion on its own event loop. Meant for tools and
/// tests that need a deployment outside a full simulation.
pub fn execute_plan(
    deployer: &mut Deployer,
    ctx: &mut DeployCtx,
    manifest: &ApplicationManifest,
    plan: DeploymentPlan,
) -> Result<DeploymentRecord, DeployError> {
    let mut timers: SimClock<DeployTimer> = SimClock::new(0);
    timers.advance_to(ctx.fabric.now());
    let (task, effects) = deployer.start_initial(ctx, manifest, plan)?;
    let mut pending = effects;
    let mut finished = None;
    loop {
        for e in pending.drain(..) {
            match e {
                DeployEffect::Schedule { at, timer } => timers.schedule_at(at, timer),
                DeployEffect::TaskDone {
                    task: t,
                    ok,
                    reason,
                    ..
                } if t == task => finished = Some((ok, reason)),
                _ => {}
            }
        }
        if let Some((ok, reason)) = finished {
            let record = deployer.record(&manifest.name).cloned().expect("record");
            return if ok {
                Ok(record)
            } else {
                Err(DeployError::Failed {
                    application: manifest.name.clone(),
                    reason: reason.unwrap_or_default(),
                })
            };
        }
        let fabric_next = ctx.fabric.next_event_time();
        let timer_next = timers.peek_time();
        match (fabric_next, timer_next) {
            (None, None) => {
                return Err(DeployError::Failed {
                    application: manifest.name.clone(),
                    reason: "stalled".into(),
                })
            }
            (Some(f), t) if t.is_none_or(|t| f <= t) => {
                let (_, notices) = ctx.fabric.step().expect("pending");
                for n in notices {
                    match n {
                        crate::fabric::FabricNotice::NodeRunning { node, .. } => {
                            pending.extend(deployer.on_node_running(ctx, node))
                        }
                        crate::fabric::FabricNotice::NodeFailed { node, .. } => {
                            pending.extend(deployer.on_node_failed(ctx, node).1)
                        }
                    }
                }
            }
            _ => {
                let (at, timer) = timers.pop().expect("pending");
                ctx.fabric.sync_clock(at);
                pending.extend(deployer.on_timer(ctx, timer));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{default_registry, FailureTarget, VmOffering};
    use crate::manifest::{parse_manifest, THREE_TIER_DESCRIPTOR};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn provider(id: &str, location: &str, medium_price: f64) -> ProviderProfile {
        ProviderProfile::new(
            id,
            id.to_uppercase(),
            location,
            vec![
                VmOffering {
                    name: "s".into(),
                    vcpu: 1,
                    ram_gib: 1.7,
                    price: medium_price / 2.0,
                },
                VmOffering {
                    name: "m".into(),
                    vcpu: 2,
                    ram_gib: 3.75,
                    price: medium_price,
                },
            ],
            54_000,
            10,
        )
        .unwrap()
    }

    /// One France provider, three medium providers elsewhere, two in Norway.
    fn listing_registry() -> Vec<ProviderProfile> {
        vec![
            provider("fr1", "France", 0.12),
            provider("us1", "Virginia", 0.12),
            provider("us2", "Oregon", 0.12),
            provider("ie1", "Ireland", 0.12),
            provider("no1", "Norway", 0.12),
            provider("no2", "Norway", 0.12),
        ]
    }

    fn three_tier() -> ApplicationManifest {
        parse_manifest(THREE_TIER_DESCRIPTOR).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn candidates_for_three_tier() {
        let sets = validate_constraints(&three_tier(), &listing_registry()).unwrap();
        assert_eq!(sets["frontend"], ["fr1"]);
        assert_eq!(sets["computing"].len(), 6);
        assert_eq!(sets["storage"], ["no1", "no2"]);
    }

    #[test]
    fn storage_needs_two_norway_providers() {
        let mut reg = listing_registry();
        reg.retain(|p| p.id != "no2");
        assert_eq!(
            validate_constraints(&three_tier(), &reg),
            Err(DeployError::ReplicationExceedsCandidates {
                component: "storage".into(),
                replication: 2,
                candidates: 1
            })
        );
    }

    #[test]
    fn unsatisfiable_constraint_is_named() {
        let mut reg = listing_registry();
        reg.retain(|p| p.id != "fr1");
        match validate_constraints(&three_tier(), &reg) {
            Err(DeployError::Unsatisfiable {
                component,
                constraint,
            }) => {
                assert_eq!(component, "frontend");
                assert_eq!(constraint, "location=France");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(
            validate_constraints(&three_tier(), &[]),
            Err(DeployError::EmptyRegistry)
        );
    }

    #[test]
    fn location_by_provider_name_or_place() {
        let reg = vec![
            ProviderProfile::new(
                "ec2-ie",
                "Amazon",
                "Ireland",
                provider("x", "x", 0.1).offerings,
                54_000,
                10,
            )
            .unwrap(),
            provider("no1", "Norway", 0.1),
        ];
        let with = |loc: &str| {
            let mut c = ComponentSpec::new("web");
            c.constraints
                .push(crate::manifest::Constraint::Location(loc.into()));
            candidates_for(&c, &reg).unwrap()
        };
        assert_eq!(with("Amazon_Ireland"), with("Ireland"));
        assert_eq!(with("Ireland"), ["ec2-ie"]);
    }

    #[test]
    fn cheapest_wins() {
        let m = parse_manifest(r#"<composite name="a"><component name="c"><implementation.contribution contribution="c.zip"/><property name="vm">medium</property></component></composite>"#).unwrap();
        let reg = vec![provider("a", "X", 0.10), provider("b", "Y", 0.08)];
        let sets = validate_constraints(&m, &reg).unwrap();
        for seed in 0..20 {
            let plan = choose_placement(&m, &sets, &reg, &mut rng(seed)).unwrap();
            assert_eq!(plan.placements[0].provider, "b");
        }
    }

    #[test]
    fn seeded_tie_break_is_pinned() {
        let m = parse_manifest(r#"<composite name="a"><component name="c"><implementation.contribution contribution="c.zip"/><property name="vm">medium</property></component></composite>"#).unwrap();
        let reg = vec![
            provider("a", "X", 0.08),
            provider("b", "Y", 0.08),
            provider("c", "Z", 0.08),
        ];
        let sets = validate_constraints(&m, &reg).unwrap();
        let pick = |seed| {
            choose_placement(&m, &sets, &reg, &mut rng(seed))
                .unwrap()
                .placements[0]
                .provider
                .clone()
        };
        // golden values from a single recorded run
        assert_eq!(pick(7), GOLDEN_SEED_7);
        assert_eq!(pick(7), pick(7));
        let all: BTreeSet<String> = (0..64).map(pick).collect();
        assert_eq!(all.len(), 3, "every tied provider is reachable");
    }

    const GOLDEN_SEED_7: &str = "a";

    #[test]
    fn replicas_use_both_equal_providers() {
        let sets = validate_constraints(&three_tier(), &listing_registry()).unwrap();
        let plan =
            choose_placement(&three_tier(), &sets, &listing_registry(), &mut rng(1)).unwrap();
        assert_eq!(plan.providers_of("storage"), BTreeSet::from(["no1", "no2"]));
        assert_eq!(plan.placements.len(), 4);
    }

    fn deploy(
        fabric: &mut Fabric,
        balancer: &mut LoadBalancer,
        deployer: &mut Deployer,
        seed: u64,
    ) -> Result<DeploymentRecord, DeployError> {
        let m = three_tier();
        let reg = fabric.registry();
        let sets = validate_constraints(&m, &reg)?;
        let plan = choose_placement(&m, &sets, &reg, &mut rng(seed))?;
        let mut log = EventLog::new();
        let mut ctx = DeployCtx {
            fabric,
            balancer,
            log: &mut log,
        };
        execute_plan(deployer, &mut ctx, &m, plan)
    }

    #[test]
    fn three_tier_deploys_four_instances() {
        let mut fabric = Fabric::new(listing_registry(), 1);
        let mut lb = LoadBalancer::default();
        let mut d = Deployer::new(DeployerConfig::default());
        let record = deploy(&mut fabric, &mut lb, &mut d, 3).unwrap();
        assert_eq!(record.status, DeploymentStatus::Active);
        assert_eq!(record.instances.len(), 4);
        let registered: usize = lb.table.routes().map(|(_, l)| l.len()).sum();
        assert_eq!(registered, 4);
        assert_eq!(lb.table.entries("DistributedApplication").unwrap().len(), 1);
        let statuses: Vec<_> = record.phases.iter().map(|p| p.status).collect();
        assert_eq!(
            statuses,
            [
                DeploymentStatus::Validating,
                DeploymentStatus::Provisioning,
                DeploymentStatus::Deploying,
                DeploymentStatus::Active
            ]
        );
        // 54 s provisioning then 4 s application deploy
        assert_eq!(record.phases.last().unwrap().at, SimTime::from_secs(58));
    }

    #[test]
    fn preallocated_node_skips_provisioning() {
        let m = parse_manifest(r#"<composite name="a"><component name="c"><implementation.contribution contribution="c.zip"/><property name="location">France</property></component></composite>"#).unwrap();
        let mut fabric = Fabric::new(listing_registry(), 1);
        let node = fabric.provision_running("fr1", VmType::Small).unwrap();
        let mut d = Deployer::new(DeployerConfig::default());
        d.adopt_node(&fabric, node).unwrap();
        let reg = fabric.registry();
        let plan = choose_placement(
            &m,
            &validate_constraints(&m, &reg).unwrap(),
            &reg,
            &mut rng(0),
        )
        .unwrap();
        let mut lb = LoadBalancer::default();
        let mut log = EventLog::new();
        let mut ctx = DeployCtx {
            fabric: &mut fabric,
            balancer: &mut lb,
            log: &mut log,
        };
        let record = execute_plan(&mut d, &mut ctx, &m, plan).unwrap();
        assert!(record
            .phases
            .iter()
            .all(|p| p.status != DeploymentStatus::Provisioning));
        assert_eq!(record.phases.last().unwrap().at, SimTime::from_secs(4));
        assert_eq!(fabric.nodes().count(), 1);
        assert_eq!(fabric.node(node).unwrap().hosted_instances, ["a/c/1"]);
    }

    #[test]
    fn provider_failure_rolls_back() {
        let mut fabric = Fabric::new(listing_registry(), 1);
        fabric
            .inject_failure(
                FailureTarget::Provider("no1".into()),
                SimTime::from_secs(10),
            )
            .unwrap();
        let mut lb = LoadBalancer::default();
        let mut d = Deployer::new(DeployerConfig::default());
        let err = deploy(&mut fabric, &mut lb, &mut d, 3).unwrap_err();
        assert!(matches!(err, DeployError::Failed { .. }));
        assert_eq!(
            d.record("DistributedApplication").unwrap().status,
            DeploymentStatus::Failed
        );
        assert_eq!(lb.table.routes().map(|(_, l)| l.len()).sum::<usize>(), 0);
        assert!(fabric.nodes().all(|n| !n.is_running()));
        assert!(!d.busy());
    }

    /// Runs the event loop until the task reports completion.
    fn drive(
        d: &mut Deployer,
        ctx: &mut DeployCtx,
        effects: Vec<DeployEffect>,
    ) -> Vec<DeployEffect> {
        let mut timers: SimClock<DeployTimer> = SimClock::new(0);
        timers.advance_to(ctx.fabric.now());
        let mut pending = effects;
        let mut seen = Vec::new();
        loop {
            for e in pending.drain(..) {
                if let DeployEffect::Schedule { at, timer } = e {
                    timers.schedule_at(at, timer);
                    continue;
                }
                let done = matches!(e, DeployEffect::TaskDone { .. });
                seen.push(e);
                if done {
                    return seen;
                }
            }
            if ctx
                .fabric
                .next_event_time()
                .is_some_and(|f| timers.peek_time().is_none_or(|t| f <= t))
            {
                let (_, notices) = ctx.fabric.step().unwrap();
                for n in notices {
                    if let crate::fabric::FabricNotice::NodeRunning { node, .. } = n {
                        pending.extend(d.on_node_running(ctx, node));
                    }
                }
            } else {
                let (at, t) = timers.pop().expect("progress");
                ctx.fabric.sync_clock(at);
                pending.extend(d.on_timer(ctx, t));
            }
        }
    }

    #[test]
    fn replacement_keeps_shape_and_moves_provider() {
        let mut fabric = Fabric::new(default_registry(), 1);
        let mut lb = LoadBalancer::default();
        let mut d = Deployer::new(DeployerConfig::default());
        let before = deploy(&mut fabric, &mut lb, &mut d, 5).unwrap();
        let victim = d.instances_of("DistributedApplication", "storage")[0].clone();
        fabric
            .inject_failure(FailureTarget::Node(victim.node), fabric.now())
            .unwrap();
        fabric.step();
        let mut log = EventLog::new();
        let mut ctx = DeployCtx {
            fabric: &mut fabric,
            balancer: &mut lb,
            log: &mut log,
        };
        let (lost, _) = d.on_node_failed(&mut ctx, victim.node);
        assert_eq!(lost, vec![victim.clone()]);
        let (_, effects) = d
            .start_replacement(&mut ctx, &victim.instance, &mut rng(9))
            .unwrap();
        assert_eq!(
            d.record("DistributedApplication").unwrap().status,
            DeploymentStatus::Deploying
        );
        let all = drive(&mut d, &mut ctx, effects);
        assert!(matches!(
            all.last(),
            Some(DeployEffect::TaskDone { ok: true, .. })
        ));
        let after = d.record("DistributedApplication").unwrap();
        assert_eq!(after.status, DeploymentStatus::Active);
        for c in ["frontend", "computing", "storage"] {
            assert_eq!(after.plan.replicas_of(c), before.plan.replicas_of(c));
        }
        assert_eq!(after.plan.providers_of("storage").len(), 2);
        assert!(lb.table.find(&victim.instance).is_none());
        assert_eq!(
            lb.table
                .entries("DistributedApplication/storage")
                .unwrap()
                .len(),
            2
        );
    }

    #[test]
    fn scale_out_then_in_removes_newest() {
        let mut fabric = Fabric::new(default_registry(), 1);
        let mut lb = LoadBalancer::default();
        let mut d = Deployer::new(DeployerConfig::default());
        deploy(&mut fabric, &mut lb, &mut d, 5).unwrap();
        let mut log = EventLog::new();
        let mut ctx = DeployCtx {
            fabric: &mut fabric,
            balancer: &mut lb,
            log: &mut log,
        };
        let (_, effects) = d
            .start_scale_out(&mut ctx, "DistributedApplication", "computing", &mut rng(2))
            .unwrap();
        assert!(d.in_flight("DistributedApplication", "computing"));
        assert!(!d.in_flight("DistributedApplication", "storage"));
        let up = drive(&mut d, &mut ctx, effects)
            .into_iter()
            .find_map(|e| match e {
                DeployEffect::InstanceUp(i) => Some(i),
                _ => None,
            });
        let up = up.unwrap();
        assert_eq!(up.instance, "DistributedApplication/computing/2");
        let first = d.instances_of("DistributedApplication", "computing")[0]
            .provider
            .clone();
        assert_ne!(up.provider, first);
        assert_eq!(
            lb.table
                .entries("DistributedApplication/computing")
                .unwrap()
                .len(),
            2
        );
        let mut ctx = DeployCtx {
            fabric: &mut fabric,
            balancer: &mut lb,
            log: &mut log,
        };
        let down = d
            .scale_in(&mut ctx, "DistributedApplication", "computing")
            .unwrap();
        assert!(matches!(&down[0], DeployEffect::InstanceDown(i) if i.instance == up.instance));
        assert_eq!(
            lb.table
                .entries("DistributedApplication/computing")
                .unwrap()
                .len(),
            1
        );
        assert!(!fabric.is_running(up.node));
        assert_eq!(
            d.record("DistributedApplication")
                .unwrap()
                .plan
                .replicas_of("computing"),
            1
        );
    }

    proptest! {
        #[test]
        fn plans_are_sound_optimal_and_deterministic(
            prices in proptest::collection::vec(1u32..5, 3..8),
            replication in 1u32..3,
            seed in any::<u64>(),
        ) {
            let reg: Vec<ProviderProfile> = prices
                .iter()
                .enumerate()
                .map(|(i, p)| provider(&format!("p{i}"), if i % 2 == 0 { "Norway" } else { "France" }, *p as f64 / 100.0))
                .collect();
            let text = format!(
                r#"<composite name="a"><component name="c"><implementation.contribution contribution="c.zip"/><property name="location">Norway</property><property name="vm">medium</property><property name="replication">{replication}</property></component></composite>"#
            );
            let m = parse_manifest(&text).unwrap();
            let sets = validate_constraints(&m, &reg).unwrap();
            let plan = choose_placement(&m, &sets, &reg, &mut rng(seed)).unwrap();
            prop_assert_eq!(&plan, &choose_placement(&m, &sets, &reg, &mut rng(seed)).unwrap());
            prop_assert_eq!(plan.replicas_of("c"), replication as usize);
            prop_assert_eq!(plan.providers_of("c").len(), replication as usize);
            let mut used = BTreeSet::new();
            for p in &plan.placements {
                let profile = reg.iter().find(|r| r.id == p.provider).unwrap();
                prop_assert!(profile.matches_location("Norway"));
                // nothing still available was strictly cheaper
                for other in sets["c"].iter().filter(|id| !used.contains(*id)) {
                    let o = reg.iter().find(|r| &r.id == other).unwrap();
                    prop_assert!(o.price_of(VmType::Medium).unwrap() >= p.price);
                }
                used.insert(p.provider.clone());
            }
        }
    }
}
