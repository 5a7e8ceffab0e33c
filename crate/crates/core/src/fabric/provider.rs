use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{classify_vm, FabricError, VmType};

pub const DEFAULT_PROVISION_DELAY_MS: u64 = 54_000;

/// One VM offering in a provider's own terms (e.g. `m1.small`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmOffering {
    pub name: String,
    pub vcpu: u32,
    pub ram_gib: f64,
    /// Currency units per hour.
    pub price: f64,
}

impl VmOffering {
    pub fn vm_type(&self) -> VmType {
        classify_vm(self.vcpu, self.ram_gib)
    }
}

/// Registry file record. Offerings are classified into the shared taxonomy
/// when converted into a [`ProviderProfile`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProviderRecord {
    id: String,
    display_name: String,
    location: String,
    offerings: Vec<VmOffering>,
    #[serde(default = "default_provision_delay")]
    provision_delay_ms: u64,
    base_latency_ms: u64,
    #[serde(default = "default_true")]
    monitorable: bool,
}

fn default_provision_delay() -> u64 {
    DEFAULT_PROVISION_DELAY_MS
}

fn default_true() -> bool {
    true
}

/// A simulated cloud provider: where it is, what it sells and how fast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProviderRecord", into = "ProviderRecord")]
pub struct ProviderProfile {
    pub id: String,
    pub display_name: String,
    pub location: String,
    pub offerings: Vec<VmOffering>,
    /// Cheapest offering per VM type.
    pub vm_catalog: BTreeMap<VmType, VmOffering>,
    pub provision_delay_ms: u64,
    pub base_latency_ms: u64,
    /// Whether instance metrics can be captured on this provider.
    pub monitorable: bool,
}

impl ProviderProfile {
    pub fn new(
        id: impl Into<String>,
        display_name: impl Into<String>,
        location: impl Into<String>,
        offerings: Vec<VmOffering>,
        provision_delay_ms: u64,
        base_latency_ms: u64,
    ) -> Result<Self, FabricError> {
        ProviderRecord {
            id: id.into(),
            display_name: display_name.into(),
            location: location.into(),
            offerings,
            provision_delay_ms,
            base_latency_ms,
            monitorable: true,
        }
        .try_into()
    }

    pub fn with_monitoring(mut self, monitorable: bool) -> Self {
        self.monitorable = monitorable;
        self
    }

    pub fn price_of(&self, vm: VmType) -> Option<f64> {
        self.vm_catalog.get(&vm).map(|o| o.price)
    }

    pub fn offers(&self, vm: VmType) -> bool {
        self.vm_catalog.contains_key(&vm)
    }
}

impl TryFrom<ProviderRecord> for ProviderProfile {
    type Error = FabricError;

    fn try_from(r: ProviderRecord) -> Result<Self, FabricError> {
        let invalid = |reason: &str| FabricError::InvalidProvider {
            id: r.id.clone(),
            reason: reason.to_string(),
        };
        if r.id.trim().is_empty() {
            return Err(invalid("empty id"));
        }
        if r.offerings.is_empty() {
            return Err(invalid("empty vm catalog"));
        }
        if r.base_latency_ms == 0 {
            return Err(invalid("base latency must be positive"));
        }
        let mut vm_catalog: BTreeMap<VmType, VmOffering> = BTreeMap::new();
        for o in &r.offerings {
            if o.price.is_nan() || o.price <= 0.0 {
                return Err(invalid(&format!(
                    "offering `{}` has a non-positive price",
                    o.name
                )));
            }
            if o.vcpu == 0 || o.ram_gib.is_nan() || o.ram_gib <= 0.0 {
                return Err(invalid(&format!(
                    "offering `{}` has no vcpu or ram",
                    o.name
                )));
            }
            let slot = vm_catalog.entry(o.vm_type()).or_insert_with(|| o.clone());
            if o.price < slot.price {
                *slot = o.clone();
            }
        }
        Ok(ProviderProfile {
            id: r.id,
            display_name: r.display_name,
            location: r.location,
            offerings: r.offerings,
            vm_catalog,
            provision_delay_ms: r.provision_delay_ms,
            base_latency_ms: r.base_latency_ms,
            monitorable: r.monitorable,
        })
    }
}

impl From<ProviderProfile> for ProviderRecord {
    fn from(p: ProviderProfile) -> Self {
        ProviderRecord {
            id: p.id,
            display_name: p.display_name,
            location: p.location,
            offerings: p.offerings,
            provision_delay_ms: p.provision_delay_ms,
            base_latency_ms: p.base_latency_ms,
            monitorable: p.monitorable,
        }
    }
}

pub fn parse_registry(json: &str) -> Result<Vec<ProviderProfile>, FabricError> {
    let providers: Vec<ProviderProfile> =
        serde_json::from_str(json).map_err(|e| FabricError::Registry(e.to_string()))?;
    let mut seen = std::collections::BTreeSet::new();
    for p in &providers {
        if !seen.insert(p.id.as_str()) {
            return Err(FabricError::Registry(format!(
                "duplicate provider id `{}`",
                p.id
            )));
        }
    }
    Ok(providers)
}

pub fn load_registry(path: impl AsRef<Path>) -> Result<Vec<ProviderProfile>, FabricError> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| FabricError::Registry(format!("{}: {e}", path.as_ref().display())))?;
    parse_registry(&text)
}

/// The default ten-provider registry used by the bundled scenarios.
pub fn default_registry() -> Vec<ProviderProfile> {
    parse_registry(include_str!("../../scenarios/providers.json"))
        .expect("bundled registry is valid")
}

/// Normalizes a location or provider name for case-insensitive matching.
/// Spaces, dashes and underscores are equivalent separators.
pub fn normalize_name(s: &str) -> String {
    s.trim()
        .chars()
        .map(|c| match c {
            ' ' | '-' | '_' => '_',
            c => c.to_ascii_lowercase(),
        })
        .collect()
}

impl ProviderProfile {
    /// True when a `location` annotation names this provider: its location,
    /// its id, its display name, or `<display name>_<location>`.
    pub fn matches_location(&self, wanted: &str) -> bool {
        let w = normalize_name(wanted);
        w == normalize_name(&self.location)
            || w == normalize_name(&self.id)
            || w == normalize_name(&self.display_name)
            || w == normalize_name(&format!("{}_{}", self.display_name, self.location))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offering(name: &str, vcpu: u32, ram: f64, price: f64) -> VmOffering {
        VmOffering {
            name: name.into(),
            vcpu,
            ram_gib: ram,
            price,
        }
    }

    #[test]
    fn catalog_keeps_cheapest_offering_per_type() {
        let p = ProviderProfile::new(
            "p",
            "P",
            "France",
            vec![
                offering("a", 2, 4.0, 0.2),
                offering("b", 2, 3.5, 0.15),
                offering("t", 1, 0.6, 0.02),
            ],
            0,
            5,
        )
        .unwrap();
        assert_eq!(p.price_of(VmType::Medium), Some(0.15));
        assert_eq!(p.price_of(VmType::Micro), Some(0.02));
        assert!(!p.offers(VmType::Large));
    }

    #[test]
    fn rejects_invalid_profiles() {
        assert!(ProviderProfile::new("p", "P", "X", vec![], 0, 5).is_err());
        assert!(
            ProviderProfile::new("p", "P", "X", vec![offering("a", 1, 1.0, 0.0)], 0, 5).is_err()
        );
        assert!(
            ProviderProfile::new("p", "P", "X", vec![offering("a", 1, 1.0, 0.1)], 0, 0).is_err()
        );
    }

    #[test]
    fn location_matching_accepts_provider_and_place_names() {
        let p = ProviderProfile::new(
            "ec2-eu-west",
            "Amazon",
            "Ireland",
            vec![offering("a", 1, 1.0, 0.1)],
            0,
            5,
        )
        .unwrap();
        for name in [
            "Ireland",
            "ireland",
            "Amazon",
            "Amazon_Ireland",
            "amazon-ireland",
            "EC2-EU-WEST",
        ] {
            assert!(p.matches_location(name), "{name}");
        }
        assert!(!p.matches_location("France"));
    }

    #[test]
    fn default_registry_loads() {
        let reg = default_registry();
        assert_eq!(reg.len(), 10);
        assert!(reg
            .iter()
            .all(|p| p.provision_delay_ms == DEFAULT_PROVISION_DELAY_MS));
    }

    #[test]
    fn registry_roundtrips_through_json() {
        let reg = default_registry();
        let text = serde_json::to_string(&reg).unwrap();
        assert_eq!(parse_registry(&text).unwrap(), reg);
    }
}
