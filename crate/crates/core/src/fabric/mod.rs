//! Deterministic simulation of several cloud providers.
//!
//! The fabric owns every simulated node and a private event queue for node
//! lifecycle transitions (provisioning completion, injected failures). The
//! harness interleaves this queue with its own; at equal timestamps fabric
//! events dispatch first.

mod clock;
mod provider;
mod vm;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::SimTime;

pub use clock::SimClock;
pub use provider::{
    default_registry, load_registry, normalize_name, parse_registry, ProviderProfile, VmOffering,
    DEFAULT_PROVISION_DELAY_MS,
};
pub use vm::{classify_vm, UnknownVmType, VmType};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FabricError {
    #[error("invalid provider `{id}`: {reason}")]
    InvalidProvider { id: String, reason: String },
    #[error("provider registry: {0}")]
    Registry(String),
    #[error("unknown provider `{0}`")]
    UnknownProvider(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown failure target `{0}`")]
    UnknownTarget(String),
    #[error("provider `{provider}` does not offer vm type {vm}")]
    VmTypeUnavailable { provider: String, vm: VmType },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node-{:04}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeState {
    Provisioning,
    Running,
    Failed,
    Terminated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimNode {
    pub id: NodeId,
    pub provider: String,
    pub vm_type: VmType,
    pub state: NodeState,
    pub hosted_instances: Vec<String>,
    pub reachable_latency_ms: u64,
    pub created_at: SimTime,
    running_since: Option<SimTime>,
    billed: Duration,
}

impl SimNode {
    pub fn is_running(&self) -> bool {
        self.state == NodeState::Running
    }

    /// Total time spent running, including the open interval up to `now`.
    pub fn billed_time(&self, now: SimTime) -> Duration {
        self.billed + self.running_since.map_or(Duration::ZERO, |s| now - s)
    }

    fn stop_billing(&mut self, now: SimTime) {
        if let Some(since) = self.running_since.take() {
            self.billed += now - since;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum FailureTarget {
    Node(NodeId),
    Provider(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum FabricEvent {
    NodeReady(NodeId),
    Fail(FailureTarget),
}

/// State changes surfaced to the other actors of the simulation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "notice", rename_all = "snake_case")]
pub enum FabricNotice {
    NodeRunning { node: NodeId, provider: String },
    NodeFailed { node: NodeId, provider: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BillingSummary {
    pub nodes: usize,
    pub running_hours: f64,
    pub cost: f64,
    pub terminated: usize,
    pub failed: usize,
}

pub struct Fabric {
    providers: BTreeMap<String, ProviderProfile>,
    nodes: BTreeMap<NodeId, SimNode>,
    failed_providers: BTreeSet<String>,
    clock: SimClock<FabricEvent>,
    next_node: u32,
}

impl Fabric {
    pub fn new(providers: Vec<ProviderProfile>, seed: u64) -> Self {
        Fabric {
            providers: providers.into_iter().map(|p| (p.id.clone(), p)).collect(),
            nodes: BTreeMap::new(),
            failed_providers: BTreeSet::new(),
            clock: SimClock::new(seed),
            next_node: 1,
        }
    }

    pub fn now(&self) -> SimTime {
        self.clock.now()
    }

    pub fn providers(&self) -> impl Iterator<Item = &ProviderProfile> {
        self.providers.values()
    }

    pub fn registry(&self) -> Vec<ProviderProfile> {
        self.providers.values().cloned().collect()
    }

    pub fn provider(&self, id: &str) -> Result<&ProviderProfile, FabricError> {
        self.providers
            .get(id)
            .ok_or_else(|| FabricError::UnknownProvider(id.to_string()))
    }

    pub fn provider_failed(&self, id: &str) -> bool {
        self.failed_providers.contains(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SimNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: NodeId) -> Result<&SimNode, FabricError> {
        self.nodes.get(&id).ok_or(FabricError::UnknownNode(id))
    }

    pub fn is_running(&self, id: NodeId) -> bool {
        self.nodes.get(&id).is_some_and(SimNode::is_running)
    }

    /// Creates a node in `provisioning`; it becomes `running` after the
    /// provider's provision delay on the simulated clock.
    pub fn provision_node(
        &mut self,
        provider: &str,
        vm_type: VmType,
    ) -> Result<NodeId, FabricError> {
        let delay = {
            let p = self.provider(provider)?;
            if !p.offers(vm_type) {
                return Err(FabricError::VmTypeUnavailable {
                    provider: provider.to_string(),
                    vm: vm_type,
                });
            }
            Duration::from_millis(p.provision_delay_ms)
        };
        let id = self.create_node(provider, vm_type, NodeState::Provisioning);
        self.clock.schedule_in(delay, FabricEvent::NodeReady(id));
        Ok(id)
    }

    /// Creates a node that is already running. Used to bootstrap the
    /// initial platform and for pre-allocated agent nodes.
    pub fn provision_running(
        &mut self,
        provider: &str,
        vm_type: VmType,
    ) -> Result<NodeId, FabricError> {
        let p = self.provider(provider)?;
        if !p.offers(vm_type) {
            return Err(FabricError::VmTypeUnavailable {
                provider: provider.to_string(),
                vm: vm_type,
            });
        }
        let id = self.create_node(provider, vm_type, NodeState::Running);
        let now = self.now();
        self.nodes.get_mut(&id).expect("just created").running_since = Some(now);
        Ok(id)
    }

    fn create_node(&mut self, provider: &str, vm_type: VmType, state: NodeState) -> NodeId {
        let id = NodeId(self.next_node);
        self.next_node += 1;
        let latency = self.providers[provider].base_latency_ms;
        self.nodes.insert(
            id,
            SimNode {
                id,
                provider: provider.to_string(),
                vm_type,
                state,
                hosted_instances: Vec::new(),
                reachable_latency_ms: latency,
                created_at: self.now(),
                running_since: None,
                billed: Duration::ZERO,
            },
        );
        id
    }

    /// Resolves a textual target: a node id (`node-0003` or `3`) or a
    /// provider id.
    pub fn resolve_target(&self, target: &str) -> Result<FailureTarget, FabricError> {
        if self.providers.contains_key(target) {
            return Ok(FailureTarget::Provider(target.to_string()));
        }
        let digits = target.strip_prefix("node-").unwrap_or(target);
        if let Ok(n) = digits.parse::<u32>() {
            if self.nodes.contains_key(&NodeId(n)) {
                return Ok(FailureTarget::Node(NodeId(n)));
            }
        }
        Err(FabricError::UnknownTarget(target.to_string()))
    }

    /// Schedules a failure of a node or of every node on a provider.
    pub fn inject_failure(
        &mut self,
        target: FailureTarget,
        at: SimTime,
    ) -> Result<(), FabricError> {
        match &target {
            FailureTarget::Node(id) if !self.nodes.contains_key(id) => {
                return Err(FabricError::UnknownNode(*id))
            }
            FailureTarget::Provider(p) if !self.providers.contains_key(p) => {
                return Err(FabricError::UnknownProvider(p.clone()))
            }
            _ => {}
        }
        self.clock.schedule_at(at, FabricEvent::Fail(target));
        Ok(())
    }

    /// Releases a node. Billing stops; hosted instances are dropped.
    pub fn terminate(&mut self, id: NodeId) -> Result<(), FabricError> {
        let now = self.now();
        let node = self
            .nodes
            .get_mut(&id)
            .ok_or(FabricError::UnknownNode(id))?;
        if matches!(node.state, NodeState::Running | NodeState::Provisioning) {
            node.stop_billing(now);
            node.state = NodeState::Terminated;
            node.hosted_instances.clear();
        }
        Ok(())
    }

    pub fn host_instance(&mut self, node: NodeId, instance: &str) -> Result<(), FabricError> {
        let n = self
            .nodes
            .get_mut(&node)
            .ok_or(FabricError::UnknownNode(node))?;
        if !n.hosted_instances.iter().any(|i| i == instance) {
            n.hosted_instances.push(instance.to_string());
        }
        Ok(())
    }

    pub fn unhost_instance(&mut self, node: NodeId, instance: &str) {
        if let Some(n) = self.nodes.get_mut(&node) {
            n.hosted_instances.retain(|i| i != instance);
        }
    }

    /// Round-trip latency from one node to another, `None` if either end
    /// is not running.
    pub fn ping(&self, from: NodeId, to: NodeId) -> Option<u64> {
        let from = self.nodes.get(&from)?;
        let to = self.nodes.get(&to)?;
        (from.is_running() && to.is_running()).then_some(to.reachable_latency_ms)
    }

    /// Latency seen by an external client (the balancer, the state store).
    pub fn probe(&self, to: NodeId) -> Option<u64> {
        self.nodes
            .get(&to)
            .filter(|n| n.is_running())
            .map(|n| n.reachable_latency_ms)
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.clock.peek_time()
    }

    pub fn pending_events(&self) -> usize {
        self.clock.len()
    }

    /// Advances the clock without dispatching; `t` must not skip a pending
    /// fabric event.
    pub fn sync_clock(&mut self, t: SimTime) {
        self.clock.advance_to(t);
    }

    /// Dispatches the next fabric event.
    pub fn step(&mut self) -> Option<(SimTime, Vec<FabricNotice>)> {
        let (at, event) = self.clock.pop()?;
        let notices = match event {
            FabricEvent::NodeReady(id) => self.complete_provisioning(id, at),
            FabricEvent::Fail(FailureTarget::Node(id)) => {
                self.fail_node(id, at).into_iter().collect()
            }
            FabricEvent::Fail(FailureTarget::Provider(p)) => {
                self.failed_providers.insert(p.clone());
                let ids: Vec<NodeId> = self
                    .nodes
                    .values()
                    .filter(|n| n.provider == p)
                    .map(|n| n.id)
                    .collect();
                ids.into_iter()
                    .filter_map(|id| self.fail_node(id, at))
                    .collect()
            }
        };
        Some((at, notices))
    }

    /// Dispatches every fabric event up to and including `t`.
    pub fn run_until(&mut self, t: SimTime) -> Vec<FabricNotice> {
        let mut out = Vec::new();
        while self.next_event_time().is_some_and(|n| n <= t) {
            out.extend(self.step().map(|(_, n)| n).unwrap_or_default());
        }
        self.sync_clock(t);
        out
    }

    fn complete_provisioning(&mut self, id: NodeId, at: SimTime) -> Vec<FabricNotice> {
        let provider_failed = self
            .nodes
            .get(&id)
            .is_some_and(|n| self.failed_providers.contains(&n.provider));
        let Some(node) = self.nodes.get_mut(&id) else {
            return Vec::new();
        };
        if node.state != NodeState::Provisioning {
            return Vec::new();
        }
        if provider_failed {
            node.state = NodeState::Failed;
            return vec![FabricNotice::NodeFailed {
                node: id,
                provider: node.provider.clone(),
            }];
        }
        node.state = NodeState::Running;
        node.running_since = Some(at);
        vec![FabricNotice::NodeRunning {
            node: id,
            provider: node.provider.clone(),
        }]
    }

    fn fail_node(&mut self, id: NodeId, at: SimTime) -> Option<FabricNotice> {
        let node = self.nodes.get_mut(&id)?;
        if !matches!(node.state, NodeState::Running | NodeState::Provisioning) {
            return None;
        }
        node.stop_billing(at);
        node.state = NodeState::Failed;
        Some(FabricNotice::NodeFailed {
            node: id,
            provider: node.provider.clone(),
        })
    }

    /// Closes the run: every live node is terminated, so each node ends in
    /// exactly one of `terminated` or `failed`.
    pub fn finalize(&mut self) -> BillingSummary {
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for id in ids {
            let _ = self.terminate(id);
        }
        self.billing()
    }

    pub fn billing(&self) -> BillingSummary {
        let now = self.now();
        let mut summary = BillingSummary {
            nodes: self.nodes.len(),
            running_hours: 0.0,
            cost: 0.0,
            terminated: 0,
            failed: 0,
        };
        for n in self.nodes.values() {
            let hours = n.billed_time(now).as_secs_f64() / 3600.0;
            let price = self.providers[&n.provider]
                .price_of(n.vm_type)
                .unwrap_or(0.0);
            summary.running_hours += hours;
            summary.cost += hours * price;
            match n.state {
                NodeState::Terminated => summary.terminated += 1,
                NodeState::Failed => summary.failed += 1,
                _ => {}
            }
        }
        summary
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn provider(id: &str, delay_ms: u64, latency: u64, large: bool) -> ProviderProfile {
        let mut offerings = vec![
            VmOffering {
                name: "t".into(),
                vcpu: 1,
                ram_gib: 0.6,
                price: 0.02,
            },
            VmOffering {
                name: "m".into(),
                vcpu: 2,
                ram_gib: 4.0,
                price: 0.12,
            },
        ];
        if large {
            offerings.push(VmOffering {
                name: "l".into(),
                vcpu: 8,
                ram_gib: 32.0,
                price: 0.5,
            });
        }
        ProviderProfile::new(id, id, "Nowhere", offerings, delay_ms, latency).unwrap()
    }

    #[test]
    fn provisioned_node_runs_after_delay() {
        let mut f = Fabric::new(vec![provider("a", 54_000, 3, false)], 1);
        let id = f.provision_node("a", VmType::Medium).unwrap();
        assert_eq!(f.node(id).unwrap().state, NodeState::Provisioning);
        let (at, notices) = f.step().unwrap();
        assert_eq!(at, SimTime::from_secs(54));
        assert_eq!(
            notices,
            vec![FabricNotice::NodeRunning {
                node: id,
                provider: "a".into()
            }]
        );
        assert!(f.is_running(id));
    }

    #[test]
    fn zero_delay_node_runs_immediately() {
        let mut f = Fabric::new(vec![provider("a", 0, 3, false)], 1);
        let id = f.provision_node("a", VmType::Micro).unwrap();
        f.run_until(SimTime::ZERO);
        assert!(f.is_running(id));
        assert_eq!(f.now(), SimTime::ZERO);
    }

    #[test]
    fn missing_vm_type_is_rejected() {
        let mut f = Fabric::new(vec![provider("a", 0, 3, false)], 1);
        assert!(matches!(
            f.provision_node("a", VmType::Large),
            Err(FabricError::VmTypeUnavailable { .. })
        ));
        assert!(Fabric::new(vec![provider("b", 0, 3, true)], 1)
            .provision_node("b", VmType::Large)
            .is_ok());
    }

    #[test]
    fn failure_makes_node_unreachable_and_isolates_others() {
        let mut f = Fabric::new(
            vec![provider("a", 0, 3, false), provider("b", 0, 7, false)],
            1,
        );
        let x = f.provision_running("a", VmType::Micro).unwrap();
        let y = f.provision_running("a", VmType::Micro).unwrap();
        let z = f.provision_running("b", VmType::Micro).unwrap();
        f.inject_failure(FailureTarget::Node(x), SimTime::from_secs(600))
            .unwrap();
        f.run_until(SimTime::from_millis(599_999));
        assert_eq!(f.ping(y, x), Some(3));
        f.run_until(SimTime::from_secs(600));
        assert_eq!(f.ping(y, x), None);
        assert_eq!(f.ping(y, z), Some(7));
        assert_eq!(f.ping(z, y), Some(3));
        assert_eq!(f.ping(z, y), f.ping(z, y));
    }

    #[test]
    fn provider_failure_fails_all_its_nodes_only() {
        let mut f = Fabric::new(
            vec![provider("a", 0, 3, false), provider("b", 0, 7, false)],
            1,
        );
        let x = f.provision_running("a", VmType::Micro).unwrap();
        let z = f.provision_running("b", VmType::Micro).unwrap();
        let target = f.resolve_target("a").unwrap();
        f.inject_failure(target, SimTime::from_secs(1)).unwrap();
        let notices = f.run_until(SimTime::from_secs(1));
        assert_eq!(notices.len(), 1);
        assert!(!f.is_running(x));
        assert!(f.is_running(z));
    }

    #[test]
    fn unknown_targets_are_errors() {
        let mut f = Fabric::new(vec![provider("a", 0, 3, false)], 1);
        assert!(f.resolve_target("nope").is_err());
        assert!(f
            .inject_failure(FailureTarget::Node(NodeId(42)), SimTime::ZERO)
            .is_err());
        assert!(f
            .inject_failure(FailureTarget::Provider("zz".into()), SimTime::ZERO)
            .is_err());
    }

    #[test]
    fn billing_sums_running_intervals_and_closes_every_node() {
        let mut f = Fabric::new(vec![provider("a", 1_800_000, 3, false)], 1);
        let x = f.provision_node("a", VmType::Medium).unwrap();
        let y = f.provision_node("a", VmType::Medium).unwrap();
        f.run_until(SimTime::from_secs(1800));
        f.inject_failure(FailureTarget::Node(y), SimTime::from_secs(3600))
            .unwrap();
        f.run_until(SimTime::from_secs(5400));
        let summary = f.finalize();
        // x ran 1800..5400 (1 h), y ran 1800..3600 (0.5 h)
        assert!((summary.running_hours - 1.5).abs() < 1e-12);
        assert!((summary.cost - 1.5 * 0.12).abs() < 1e-12);
        assert_eq!((summary.terminated, summary.failed), (1, 1));
        assert_eq!(f.node(x).unwrap().state, NodeState::Terminated);
    }
}
