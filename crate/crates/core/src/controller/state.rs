//! Typed view of the controller's key-value state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::election::RoleState;
use crate::deployer::DeploymentRecord;
use crate::fabric::{NodeId, NodeState, VmType};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceEntry {
    pub provider: String,
    pub vm_type: VmType,
    pub state: NodeState,
    pub capacity_remaining: u32,
}

/// Everything a master knows, as stored under `resource/<node>`,
/// `deployment/<app>`, `routing/version` and `role/<master>`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub resources: BTreeMap<NodeId, ResourceEntry>,
    pub deployments: BTreeMap<String, DeploymentRecord>,
    pub routing_version: u64,
    pub roles: BTreeMap<String, RoleState>,
    /// Keys outside the typed namespaces.
    pub extra: BTreeMap<String, Value>,
}

const RESOURCE: &str = "resource/";
const DEPLOYMENT: &str = "deployment/";
const ROLE: &str = "role/";
const ROUTING: &str = "routing/version";

fn parse_node(s: &str) -> Option<NodeId> {
    s.strip_prefix("node-")
        .unwrap_or(s)
        .parse()
        .ok()
        .map(NodeId)
}

impl SystemState {
    pub fn to_kv(&self) -> BTreeMap<String, Value> {
        let mut kv = self.extra.clone();
        for (id, r) in &self.resources {
            kv.insert(
                format!("{RESOURCE}{id}"),
                serde_json::to_value(r).expect("serializable"),
            );
        }
        for (app, d) in &self.deployments {
            kv.insert(
                format!("{DEPLOYMENT}{app}"),
                serde_json::to_value(d).expect("serializable"),
            );
        }
        for (m, r) in &self.roles {
            kv.insert(
                format!("{ROLE}{m}"),
                serde_json::to_value(r).expect("serializable"),
            );
        }
        kv.insert(ROUTING.to_string(), Value::from(self.routing_version));
        kv
    }

    /// Rebuilds the typed view; entries that do not decode stay in `extra`.
    pub fn from_kv(kv: &BTreeMap<String, Value>) -> Self {
        let mut s = SystemState::default();
        for (k, v) in kv {
            let typed = if let Some(rest) = k.strip_prefix(RESOURCE) {
                parse_node(rest)
                    .zip(serde_json::from_value(v.clone()).ok())
                    .map(|(id, r)| s.resources.insert(id, r))
                    .is_some()
            } else if let Some(app) = k.strip_prefix(DEPLOYMENT) {
                serde_json::from_value(v.clone())
                    .ok()
                    .map(|d| s.deployments.insert(app.to_string(), d))
                    .is_some()
            } else if let Some(m) = k.strip_prefix(ROLE) {
                serde_json::from_value(v.clone())
                    .ok()
                    .map(|r| s.roles.insert(m.to_string(), r))
                    .is_some()
            } else if k == ROUTING {
                v.as_u64().map(|n| s.routing_version = n).is_some()
            } else {
                false
            };
            if !typed {
                s.extra.insert(k.clone(), v.clone());
            }
        }
        s
    }

    pub fn leaders(&self) -> Vec<&str> {
        self.roles
            .values()
            .filter(|r| r.role == super::election::Role::Leader)
            .map(|r| r.master_id.as_str())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::election::Role;
    use crate::SimTime;

    #[test]
    fn kv_roundtrip() {
        let mut s = SystemState::default();
        s.resources.insert(
            NodeId(3),
            ResourceEntry {
                provider: "p".into(),
                vm_type: VmType::Small,
                state: NodeState::Running,
                capacity_remaining: 1,
            },
        );
        s.roles.insert(
            "master-1".into(),
            RoleState {
                master_id: "master-1".into(),
                role: Role::Leader,
                last_heartbeat: SimTime::ZERO,
                reachable_latency: Some(4),
            },
        );
        s.routing_version = 7;
        s.extra.insert("counter".into(), Value::from(1));
        let kv = s.to_kv();
        assert!(kv.contains_key("resource/node-0003"));
        assert_eq!(SystemState::from_kv(&kv), s);
        assert_eq!(s.leaders(), ["master-1"]);
    }
}
