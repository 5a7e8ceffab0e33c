use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Provider-independent VM size class.
///
/// Declaration order is the total order: `Micro < Small < Medium < Large`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VmType {
    Micro,
    Small,
    Medium,
    Large,
}

impl VmType {
    pub const ALL: [VmType; 4] = [VmType::Micro, VmType::Small, VmType::Medium, VmType::Large];

    pub fn as_str(self) -> &'static str {
        match self {
            VmType::Micro => "micro",
            VmType::Small => "small",
            VmType::Medium => "medium",
            VmType::Large => "large",
        }
    }
}

impl fmt::Display for VmType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown vm type `{0}` (expected micro, small, medium or large)")]
pub struct UnknownVmType(pub String);

impl FromStr for VmType {
    type Err = UnknownVmType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "micro" => Ok(VmType::Micro),
            "small" => Ok(VmType::Small),
            "medium" => Ok(VmType::Medium),
            "large" => Ok(VmType::Large),
            _ => Err(UnknownVmType(s.to_string())),
        }
    }
}

/// Maps a provider's native VM characteristics onto the shared taxonomy.
///
/// | type   | vcpu | ram (GiB) |
/// |--------|------|-----------|
/// | micro  | ≤ 1  | < 1       |
/// | small  | ≤ 1  | ≤ 2       |
/// | medium | ≤ 2  | ≤ 4       |
/// | large  | anything larger  |
///
/// Each class region is downward closed and contained in the next one, so
/// the mapping is monotone in both arguments.
pub fn classify_vm(vcpu: u32, ram_gib: f64) -> VmType {
    if vcpu <= 1 && ram_gib < 1.0 {
        VmType::Micro
    } else if vcpu <= 1 && ram_gib <= 2.0 {
        VmType::Small
    } else if vcpu <= 2 && ram_gib <= 4.0 {
        VmType::Medium
    } else {
        VmType::Large
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn classification_table() {
        assert_eq!(classify_vm(1, 0.6), VmType::Micro);
        assert_eq!(classify_vm(1, 1.0), VmType::Small);
        assert_eq!(classify_vm(1, 1.7), VmType::Small);
        assert_eq!(classify_vm(2, 4.0), VmType::Medium);
        assert_eq!(classify_vm(1, 3.75), VmType::Medium);
        assert_eq!(classify_vm(8, 32.0), VmType::Large);
        assert_eq!(classify_vm(2, 7.5), VmType::Large);
    }

    #[test]
    fn parse_and_order() {
        assert_eq!("Medium".parse::<VmType>().unwrap(), VmType::Medium);
        assert!("huge".parse::<VmType>().is_err());
        assert!(
            VmType::Micro < VmType::Small
                && VmType::Small < VmType::Medium
                && VmType::Medium < VmType::Large
        );
    }

    proptest! {
        #[test]
        fn classification_is_monotone(
            vcpu in 1u32..16, ram in 0.1f64..64.0,
            dv in 0u32..8, dr in 0.0f64..32.0,
        ) {
            prop_assert!(classify_vm(vcpu, ram) <= classify_vm(vcpu + dv, ram + dr));
        }
    }
}
