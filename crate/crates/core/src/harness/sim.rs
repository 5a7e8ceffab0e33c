//! The scenario runner: one world clock driving the fabric, the
//! controller, the balancer, telemetry and the workload manager.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::balancer::{
    Backend, LoadBalancer, RequestOutcome, RequestStatus, RouteEntry, DEFAULT_DETECTION_BUDGET,
};
use crate::controller::{
    ControlTimer, Controller, ControllerConfig, ControllerError, Decision, Effect, MasterStatus,
    MemoryStore,
};
use crate::deployer::{DeployCtx, DeployEffect, DeployError, TaskKind, TimerKind};
use crate::fabric::{Fabric, FabricNotice, FailureTarget, NodeId, SimClock};
use crate::harness::report::{
    series_of, Aggregate, AlertRecord, DeploymentSummary, FailoverRecord, InjectedFailure,
    RunOutput, RunReport,
};
use crate::harness::scenario::{Scenario, ScenarioError, Target};
use crate::log::EventLog;
use crate::manifest::ApplicationManifest;
use crate::telemetry::{QueueModel, Telemetry, FLUSH_INTERVAL, SAMPLE_INTERVAL};
use crate::workload::{Severity, WmOutput, WorkloadManager, DEFAULT_ALPHA};
use crate::SimTime;

const ACTOR: &str = "harness";
const WM_TICK: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

impl From<DeployError> for RunError {
    fn from(e: DeployError) -> Self {
        RunError::Controller(ControllerError::Deploy(e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Event {
    Request { workload: usize, k: u32 },
    Failure(usize),
    Control(ControlTimer),
    Sample,
    Flush,
    WmTick,
    Probe,
    Heartbeat,
    Checkpoint,
    Discovery,
}

impl Event {
    /// Periodic events and watchdog timeouts do not hold a run open.
    fn periodic(&self) -> bool {
        match self {
            Event::Request { .. } | Event::Failure(_) => false,
            Event::Control(ControlTimer::Deploy(t)) => t.kind == TimerKind::Timeout,
            Event::Control(_) => false,
            _ => true,
        }
    }
}

/// Serves requests on the per-instance queues.
struct QueueBackend<'a> {
    fabric: &'a Fabric,
    telemetry: &'a mut Telemetry,
    monitoring_ms: f64,
    balancer_ms: f64,
    timeout_ms: f64,
}

impl Backend for QueueBackend<'_> {
    fn serve(&mut self, entry: &RouteEntry, at: SimTime) -> Option<f64> {
        if !self.fabric.is_running(entry.node) {
            return None;
        }
        let a = self
            .telemetry
            .serve(&entry.instance, at, self.monitoring_ms)
            .ok()?;
        Some(if a.rejected {
            self.timeout_ms
        } else {
            a.latency_ms + self.balancer_ms
        })
    }
}

macro_rules! ctx {
    ($s:expr) => {
        DeployCtx {
            fabric: &mut $s.fabric,
            balancer: &mut $s.balancer,
            log: &mut $s.log,
        }
    };
}

/// A single scenario run.
pub struct Simulation {
    scenario: Scenario,
    seed: u64,
    manifests: Vec<ApplicationManifest>,
    fabric: Fabric,
    balancer: LoadBalancer,
    log: EventLog,
    controller: Controller,
    telemetry: Telemetry,
    wm: Option<WorkloadManager>,
    clock: SimClock<Event>,
    pending: usize,
    last_activity: Option<SimTime>,
    initial_tasks: BTreeSet<u64>,
    ready_at: Option<SimTime>,
    connections: Vec<Vec<SimTime>>,
    next_request: u64,
    requests: Vec<RequestOutcome>,
    alerts: Vec<AlertRecord>,
    failures: Vec<InjectedFailure>,
    failed_nodes: BTreeMap<NodeId, SimTime>,
    failovers: Vec<FailoverRecord>,
    replace_wanted: BTreeSet<String>,
}

impl Simulation {
    pub fn new(scenario: Scenario, seed: u64) -> Result<Self, RunError> {
        scenario.validate()?;
        let registry = scenario.registry()?;
        let manifests = scenario.manifests()?;
        let mut wm = scenario
            .platform
            .then(|| WorkloadManager::new(DEFAULT_ALPHA, scenario.elasticity));
        if let Some(wm) = &mut wm {
            for i in &scenario.indicators {
                wm.add_indicator(i.clone());
            }
        }
        Ok(Simulation {
            fabric: Fabric::new(registry, seed),
            balancer: LoadBalancer::new(scenario.timeout_ms(), DEFAULT_DETECTION_BUDGET),
            log: EventLog::new(),
            controller: Controller::new(
                ControllerConfig::default(),
                Box::new(MemoryStore::new()),
                seed,
            ),
            telemetry: Telemetry::new(),
            wm,
            clock: SimClock::new(seed),
            pending: 0,
            last_activity: None,
            initial_tasks: BTreeSet::new(),
            ready_at: None,
            connections: Vec::new(),
            next_request: 0,
            requests: Vec::new(),
            alerts: Vec::new(),
            failures: Vec::new(),
            failed_nodes: BTreeMap::new(),
            failovers: Vec::new(),
            replace_wanted: BTreeSet::new(),
            manifests,
            scenario,
            seed,
        })
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    fn now(&self) -> SimTime {
        self.fabric.now()
    }

    fn schedule(&mut self, at: SimTime, event: Event) {
        if !event.periodic() {
            self.pending += 1;
        }
        self.clock.schedule_at(at, event);
    }

    pub fn run(mut self) -> Result<RunOutput, RunError> {
        let s = &self.scenario;
        self.log.record(
            SimTime::ZERO,
            ACTOR,
            "run_started",
            json!({"scenario": s.name, "seed": self.seed, "platform": s.platform, "elasticity": s.elasticity}),
        );
        let masters = s.master_providers(&self.fabric.registry());
        self.controller.bootstrap(&mut ctx!(self), &masters)?;
        for p in self.scenario.preallocate.clone() {
            self.controller
                .preallocate(&mut ctx!(self), &p.provider, p.vm)?;
        }
        for (m, spec) in self
            .manifests
            .clone()
            .iter()
            .zip(self.scenario.applications.clone())
        {
            self.balancer.table.ensure_route(&m.name);
            if let Some(wm) = &mut self.wm {
                wm.track_application(
                    &m.name,
                    &m.entry_component().name,
                    spec.service_time_ms,
                    spec.thresholds,
                );
                for c in &m.components {
                    if let Some(rule) = &c.elasticity {
                        wm.add_rule(&m.name, &c.name, *rule);
                    }
                }
            }
            let (task, effects) = self.controller.deploy_application(&mut ctx!(self), m)?;
            self.initial_tasks.insert(task);
            self.apply(effects);
        }
        if self.initial_tasks.is_empty() {
            self.mark_ready();
        }
        let hb = self.controller.config().heartbeat;
        let cp = self.controller.config().checkpoint_interval;
        let disc = self.controller.config().discovery_interval;
        let probe = self.balancer.probe_period();
        for (period, event) in [
            (hb, Event::Heartbeat),
            (probe, Event::Probe),
            (SAMPLE_INTERVAL, Event::Sample),
            (FLUSH_INTERVAL, Event::Flush),
            (WM_TICK, Event::WmTick),
            (cp, Event::Checkpoint),
            (disc, Event::Discovery),
        ] {
            self.clock.schedule_at(SimTime::ZERO + period, event);
        }
        self.event_loop();
        Ok(self.finish())
    }

    fn quiescent(&self) -> bool {
        self.pending == 0
            && self.fabric.next_event_time().is_none()
            && !self.controller.busy()
            && self.ready_at.is_some()
    }

    fn event_loop(&mut self) {
        let settle = Duration::from_secs_f64(self.scenario.settle_s);
        let horizon = SimTime::ZERO + Duration::from_secs_f64(self.scenario.horizon_s);
        loop {
            let f = self.fabric.next_event_time();
            let w = self.clock.peek_time();
            let next = match (f, w) {
                (None, None) => break,
                (Some(f), None) => f,
                (None, Some(w)) => w,
                (Some(f), Some(w)) => f.min(w),
            };
            if next > horizon {
                self.log.record(
                    self.now(),
                    ACTOR,
                    "horizon_reached",
                    json!({"horizon_s": self.scenario.horizon_s}),
                );
                break;
            }
            if self.quiescent() && self.last_activity.is_none_or(|t| next >= t + settle) {
                break;
            }
            if f == Some(next) {
                let (_, notices) = self.fabric.step().expect("pending fabric event");
                self.last_activity = Some(next);
                for n in notices {
                    self.on_notice(n);
                }
                continue;
            }
            let (at, event) = self.clock.pop().expect("pending world event");
            self.fabric.sync_clock(at);
            if !event.periodic() {
                self.pending -= 1;
                self.last_activity = Some(at);
            } else if self.controller.busy() || !self.replace_wanted.is_empty() {
                self.last_activity = Some(at);
            }
            self.dispatch(at, event);
        }
    }

    fn dispatch(&mut self, at: SimTime, event: Event) {
        match event {
            Event::Request { workload, k } => self.on_request(at, workload, k),
            Event::Failure(i) => self.on_failure(i),
            Event::Control(timer) => {
                let effects = self.controller.on_timer(&mut ctx!(self), timer);
                self.apply(effects);
            }
            Event::Heartbeat => {
                let effects = self.controller.heartbeat(&mut ctx!(self));
                self.apply(effects);
                self.clock
                    .schedule_at(at + self.controller.config().heartbeat, Event::Heartbeat);
            }
            Event::Probe => {
                self.on_probe();
                self.clock
                    .schedule_at(at + self.balancer.probe_period(), Event::Probe);
            }
            Event::Sample => {
                if self.wm.is_some() {
                    let targets: Vec<(String, NodeId)> = self
                        .telemetry
                        .instances()
                        .map(|m| (m.instance.clone(), m.node))
                        .collect();
                    for (instance, node) in targets {
                        let running = self.fabric.is_running(node);
                        self.telemetry.sample_instance(&instance, at, running);
                    }
                }
                self.clock.schedule_at(at + SAMPLE_INTERVAL, Event::Sample);
            }
            Event::Flush => {
                // metrics reach the workload manager only while a master leads
                if self.wm.is_some() && self.controller.leader().is_some() {
                    let ids: Vec<String> = self
                        .telemetry
                        .instances()
                        .map(|m| m.instance.clone())
                        .collect();
                    for id in ids {
                        let batch = self.telemetry.prepare_delivery(&id);
                        if let Some(wm) = &mut self.wm {
                            wm.ingest(batch);
                        }
                        self.telemetry.ack(&id);
                    }
                }
                self.clock.schedule_at(at + FLUSH_INTERVAL, Event::Flush);
            }
            Event::WmTick => {
                if let Some(wm) = &mut self.wm {
                    let out = wm.tick(at);
                    self.on_wm(out);
                }
                self.clock.schedule_at(at + WM_TICK, Event::WmTick);
            }
            Event::Checkpoint => {
                self.controller.periodic_checkpoint(&mut ctx!(self));
                self.clock.schedule_at(
                    at + self.controller.config().checkpoint_interval,
                    Event::Checkpoint,
                );
            }
            Event::Discovery => {
                self.controller.discovery(&mut ctx!(self));
                self.clock.schedule_at(
                    at + self.controller.config().discovery_interval,
                    Event::Discovery,
                );
            }
        }
    }

    fn mark_ready(&mut self) {
        let now = self.now();
        self.ready_at = Some(now);
        self.log.record(now, ACTOR, "ready", json!({}));
        for (w, spec) in self.scenario.workloads.clone().iter().enumerate() {
            let start = now + Duration::from_secs_f64(spec.start_s);
            // stratified jitter: one opening per unit of integrated rate
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.seed ^ (w as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let times: Vec<SimTime> = spec
                .connection_times_with(|| if spec.jitter { rng.gen::<f64>() } else { 0.5 })
                .into_iter()
                .map(|t| start + Duration::from_micros((t * 1e6).round() as u64))
                .collect();
            self.log.record(
                now,
                ACTOR,
                "workload_scheduled",
                json!({"application": spec.application, "connections": times.len(), "requests": spec.total_requests(), "hold_s": spec.hold_s()}),
            );
            self.connections.push(times);
            let n = self.connections[w].len();
            for c in 0..n {
                let at = self.connections[w][c];
                self.schedule(at, Event::Request { workload: w, k: 0 });
            }
        }
        for (i, f) in self.scenario.failures.clone().iter().enumerate() {
            self.schedule(now + Duration::from_secs_f64(f.at_s), Event::Failure(i));
        }
    }

    /// Request `k` of a connection; the next one follows after the
    /// workload's request interval.
    fn on_request(&mut self, at: SimTime, workload: usize, k: u32) {
        let spec = &self.scenario.workloads[workload];
        let app = spec.application.clone();
        let (platform, costs) = (self.scenario.platform, self.scenario.costs);
        let mut backend = QueueBackend {
            fabric: &self.fabric,
            telemetry: &mut self.telemetry,
            monitoring_ms: if platform { costs.monitoring_ms } else { 0.0 },
            balancer_ms: if platform { costs.balancer_ms } else { 0.0 },
            timeout_ms: spec.timeout_ms,
        };
        let id = self.next_request;
        self.next_request += 1;
        let outcome = self
            .balancer
            .dispatch(&app, id, at, &mut backend)
            .unwrap_or(RequestOutcome {
                request_id: id,
                application: app.clone(),
                instance: None,
                at,
                latency_ms: 0.0,
                status: RequestStatus::NoBackend,
                version: self.balancer.table.version(),
            });
        self.requests.push(outcome);
        if k + 1 < spec.requests_per_connection {
            let next = at + Duration::from_secs_f64(spec.request_interval_ms / 1e3);
            self.schedule(next, Event::Request { workload, k: k + 1 });
        }
        if let Some(wm) = &mut self.wm {
            let out = wm.on_arrival(&app, at);
            self.on_wm(out);
        }
    }

    fn on_wm(&mut self, outputs: Vec<WmOutput>) {
        let now = self.now();
        for o in outputs {
            match o {
                WmOutput::Alert(a) => {
                    let app = a.subject.split('/').next().unwrap_or_default().to_string();
                    let instances = self.balancer.table.healthy_count(&app);
                    self.log.record(
                        now,
                        "workload",
                        "drift_alert",
                        serde_json::to_value(&a).expect("serializable"),
                    );
                    self.alerts.push(AlertRecord {
                        at: a.fired_at,
                        indicator: a.indicator,
                        subject: a.subject,
                        severity: a.severity,
                        episode_start: a.episode_start,
                        instances,
                    });
                }
                WmOutput::Decision(d) => {
                    if let Ok(effects) = self
                        .controller
                        .act_on_decision(&mut ctx!(self), Decision::Scale(d))
                    {
                        self.apply(effects);
                    }
                }
            }
        }
    }

    fn update_capacity(&mut self, application: &str) {
        let healthy = self.balancer.table.healthy_count(application);
        if let Some(wm) = &mut self.wm {
            wm.set_instances(application, healthy.max(1));
        }
    }

    fn apply(&mut self, effects: Vec<Effect>) {
        let now = self.now();
        for e in effects {
            match e {
                Effect::Schedule { at, timer } => self.schedule(at, Event::Control(timer)),
                Effect::Deploy(DeployEffect::Schedule { .. }) => {
                    unreachable!("controller wraps deployer timers")
                }
                Effect::Deploy(DeployEffect::InstanceUp(info)) => {
                    let service = self
                        .manifests
                        .iter()
                        .position(|m| m.name == info.application)
                        .map_or(crate::telemetry::DEFAULT_SERVICE_TIME_MS, |i| {
                            self.scenario.applications[i].service_time_ms
                        });
                    let monitorable = self
                        .fabric
                        .provider(&info.provider)
                        .is_ok_and(|p| p.monitorable);
                    self.telemetry.attach(
                        &info.instance,
                        &info.application,
                        &info.component,
                        info.node,
                        monitorable,
                        QueueModel::new(service, self.balancer.timeout_ms()),
                        now,
                    );
                    if let Some(f) = self.failovers.iter_mut().find(|f| {
                        f.replacement.is_none()
                            && f.application == info.application
                            && f.instance.rsplit_once('/').map(|(p, _)| p)
                                == info.instance.rsplit_once('/').map(|(p, _)| p)
                    }) {
                        f.replacement = Some(info.instance.clone());
                        f.replaced_at = Some(now);
                    }
                    self.update_capacity(&info.application);
                }
                Effect::Deploy(DeployEffect::InstanceDown(info)) => {
                    self.telemetry.detach(&info.instance);
                    self.replace_wanted.remove(&info.instance);
                    self.update_capacity(&info.application);
                }
                Effect::Deploy(DeployEffect::TaskDone {
                    task,
                    kind,
                    application,
                    ..
                }) => {
                    if kind == TaskKind::Initial {
                        self.update_capacity(&application);
                    }
                    if self.initial_tasks.remove(&task)
                        && self.initial_tasks.is_empty()
                        && self.ready_at.is_none()
                    {
                        self.mark_ready();
                    }
                }
            }
        }
    }

    fn on_notice(&mut self, notice: FabricNotice) {
        let now = self.now();
        match notice {
            FabricNotice::NodeRunning { node, provider } => {
                self.log.record(
                    now,
                    "fabric",
                    "node_running",
                    json!({"node": node, "provider": provider}),
                );
                let effects = self.controller.on_node_running(&mut ctx!(self), node);
                self.apply(effects);
            }
            FabricNotice::NodeFailed { node, provider } => {
                self.log.record(
                    now,
                    "fabric",
                    "node_failed",
                    json!({"node": node, "provider": provider}),
                );
                let effects = self.controller.on_node_failed(&mut ctx!(self), node);
                self.apply(effects);
            }
        }
    }

    fn on_failure(&mut self, i: usize) {
        let now = self.now();
        let spec = self.scenario.failures[i].clone();
        let resolved: Result<FailureTarget, String> = match spec.parse_target() {
            Err(e) => Err(e.to_string()),
            Ok(Target::Leader) => self
                .controller
                .leader()
                .map(|m| FailureTarget::Node(m.node))
                .ok_or_else(|| "no leader".into()),
            Ok(Target::Follower) => self
                .controller
                .followers()
                .find(|m| m.status == MasterStatus::Running)
                .map(|m| FailureTarget::Node(m.node))
                .ok_or_else(|| "no running follower".into()),
            Ok(Target::Instance(id)) => self
                .controller
                .deployer
                .find_instance(&id)
                .map(|i| FailureTarget::Node(i.node))
                .ok_or_else(|| format!("no instance `{id}`")),
            Ok(Target::Node(n)) => self.fabric.resolve_target(&n).map_err(|e| e.to_string()),
            Ok(Target::Provider(p)) => Ok(FailureTarget::Provider(p)),
        };
        let mut record = InjectedFailure {
            at: now,
            target: spec.target.clone(),
            nodes: Vec::new(),
            skipped: None,
        };
        match resolved {
            Err(reason) => {
                self.log.record(
                    now,
                    ACTOR,
                    "failure_skipped",
                    json!({"target": spec.target, "reason": reason}),
                );
                record.skipped = Some(reason);
            }
            Ok(target) => {
                record.nodes = match &target {
                    FailureTarget::Node(n) => vec![*n],
                    FailureTarget::Provider(p) => self
                        .fabric
                        .nodes()
                        .filter(|n| {
                            &n.provider == p
                                && (n.is_running()
                                    || n.state == crate::fabric::NodeState::Provisioning)
                        })
                        .map(|n| n.id)
                        .collect(),
                };
                for n in &record.nodes {
                    self.failed_nodes.entry(*n).or_insert(now);
                    self.controller.note_injected_failure(*n, now);
                }
                self.log.record(
                    now,
                    ACTOR,
                    "inject_failure",
                    json!({"target": spec.target, "nodes": record.nodes}),
                );
                self.fabric
                    .inject_failure(target, now)
                    .expect("resolved target exists");
            }
        }
        self.failures.push(record);
    }

    fn on_probe(&mut self) {
        let now = self.now();
        let fabric = &self.fabric;
        let changes = self.balancer.probe(|n| fabric.probe(n).is_some());
        for c in changes {
            self.log.record(
                now,
                "balancer",
                "health_change",
                json!({"instance": c.instance, "healthy": c.healthy, "version": c.version}),
            );
            let info = self.controller.deployer.find_instance(&c.instance);
            if let Some(info) = &info {
                self.update_capacity(&info.application);
            }
            if c.healthy {
                self.replace_wanted.remove(&c.instance);
                continue;
            }
            let failed_at = info
                .as_ref()
                .and_then(|i| self.failed_nodes.get(&i.node).copied());
            self.failovers.push(FailoverRecord {
                instance: c.instance.clone(),
                application: info
                    .as_ref()
                    .map_or_else(String::new, |i| i.application.clone()),
                failed_at,
                detected_at: now,
                detection_ms: failed_at.map(|t| (now - t).as_secs_f64() * 1e3),
                affected_requests: 0,
                replacement: None,
                replaced_at: None,
            });
            self.replace_wanted.insert(c.instance);
        }
        if self.controller.is_unavailable() {
            self.replace_wanted.clear();
        }
        for instance in self.replace_wanted.clone() {
            let decision = Decision::ReplaceInstance {
                instance: instance.clone(),
            };
            match self.controller.act_on_decision(&mut ctx!(self), decision) {
                Ok(effects) => {
                    self.replace_wanted.remove(&instance);
                    self.apply(effects);
                }
                Err(r)
                    if r.dropped || self.controller.deployer.find_instance(&instance).is_none() =>
                {
                    self.replace_wanted.remove(&instance);
                }
                Err(_) => {}
            }
        }
    }

    /// First overload alert against the moment the offered load first
    /// exceeded what the serving instances could absorb.
    fn peak_detection_ms(&self) -> Option<f64> {
        let alert = self
            .alerts
            .iter()
            .find(|a| a.severity == Severity::Overload && a.indicator == "inter-arrival")?;
        let pos = self
            .manifests
            .iter()
            .position(|m| m.name == alert.subject)?;
        let capacity =
            alert.instances.max(1) as f64 * 1e3 / self.scenario.applications[pos].service_time_ms;
        let times: Vec<SimTime> = self
            .requests
            .iter()
            .filter(|r| r.application == alert.subject)
            .map(|r| r.at)
            .collect();
        let mut lo = 0;
        for (hi, t) in times.iter().enumerate() {
            while *t - times[lo] >= Duration::from_secs(1) {
                lo += 1;
            }
            if (hi - lo + 1) as f64 > capacity {
                return Some((alert.at.as_millis_f64() - t.as_millis_f64()).round());
            }
        }
        None
    }

    fn finish(mut self) -> RunOutput {
        let end = self.now();
        for f in &mut self.failovers {
            let since = f.failed_at.unwrap_or(f.detected_at);
            f.affected_requests = self
                .requests
                .iter()
                .filter(|r| {
                    r.instance.as_deref() == Some(f.instance.as_str())
                        && r.at >= since
                        && r.status != RequestStatus::Ok
                })
                .count() as u64;
        }
        let series = series_of(&self.requests);
        let aggregate = Aggregate::of(&series);
        let deployments = self
            .controller
            .deployer
            .records()
            .iter()
            .map(|(app, r)| DeploymentSummary {
                application: app.clone(),
                status: r.status,
                instances: r.instances.values().cloned().collect(),
            })
            .collect();
        let checkpoints = self
            .controller
            .checkpoints()
            .sequences()
            .ok()
            .and_then(|s| s.last().copied())
            .unwrap_or(0);
        let billing = self.fabric.finalize();
        self.log.record(
            end,
            ACTOR,
            "run_finished",
            json!({"requests": aggregate.total, "failed": aggregate.failed}),
        );
        let report = RunReport {
            scenario: self.scenario.name.clone(),
            seed: self.seed,
            platform: self.scenario.platform,
            elasticity: self.scenario.elasticity,
            workloads: self.scenario.workloads.clone(),
            ready_at: self.ready_at,
            end_time: end,
            series,
            aggregate,
            scale_events: self.controller.scale_events().to_vec(),
            alerts: self.alerts.clone(),
            failures: self.failures.clone(),
            failovers: self.failovers.clone(),
            recoveries: self.controller.recoveries().to_vec(),
            peak_detection_ms: self.peak_detection_ms(),
            deployments,
            checkpoints,
            billing,
        };
        RunOutput {
            report,
            log: self.log,
            requests: self.requests,
        }
    }
}

/// Runs a scenario to completion.
pub fn run_scenario(scenario: &Scenario, seed: u64) -> Result<RunOutput, RunError> {
    Simulation::new(scenario.clone(), seed)?.run()
}
