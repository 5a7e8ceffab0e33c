//! Annotated application descriptors.
//!
//! A descriptor is a `composite` element tree. Each `component` names its
//! contribution archive, its services and references, and up to four
//! annotation properties: `location`, `vm`, `replication` and `elasticity`.

mod package;
mod rule;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::fabric::VmType;

pub use package::{build_package, validate_package, PackageReport, DESCRIPTOR_FILE};
pub use rule::{
    parse_elasticity_rule, Comparator, Condition, ElasticityRule, Metric, Quantity, ScaleAction,
    Unit, DEFAULT_RULE_WINDOW,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ManifestError {
    #[error("syntax error at {line}:{column}: {message}")]
    Syntax {
        line: u32,
        column: u32,
        message: String,
    },
    #[error("unknown property `{name}` on component `{component}`")]
    UnknownProperty { component: String, name: String },
    #[error("duplicate component `{0}`")]
    DuplicateComponent(String),
    #[error("duplicate `{constraint}` property on component `{component}`")]
    DuplicateConstraint {
        component: String,
        constraint: String,
    },
    #[error(
        "reference `{component}.{reference}` targets `{target}`, which is not a declared service"
    )]
    DanglingWire {
        component: String,
        reference: String,
        target: String,
    },
    #[error("invalid value `{value}` for `{property}` on component `{component}`: {reason}")]
    InvalidProperty {
        component: String,
        property: String,
        value: String,
        reason: String,
    },
    #[error("composite declares no components")]
    NoComponents,
    #[error("elasticity rule: {0}")]
    RuleGrammar(String),
    #[error("unknown metric `{0}` (expected ResponseTime, RequestRate or CpuLoad)")]
    UnknownMetric(String),
    #[error("threshold must be strictly positive, got {0}")]
    NonPositiveThreshold(f64),
    #[error("rule window must be strictly positive")]
    NonPositiveWindow,
    #[error("package: {0}")]
    Package(String),
    #[error("package has no `{DESCRIPTOR_FILE}` descriptor")]
    MissingDescriptor,
    #[error("package contains no nested contribution archive")]
    MissingArchive,
    #[error("component `{component}` references contribution `{archive}`, which the package does not contain")]
    AbsentArchive { component: String, archive: String },
}

/// A placement or sizing annotation as a `{name, value}` pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", content = "value", rename_all = "lowercase")]
pub enum Constraint {
    /// A location name or a provider name.
    Location(String),
    Vm(VmType),
    /// Number of instances, always at least one.
    Replication(u32),
}

impl Constraint {
    pub fn name(&self) -> &'static str {
        match self {
            Constraint::Location(_) => "location",
            Constraint::Vm(_) => "vm",
            Constraint::Replication(_) => "replication",
        }
    }

    pub fn value(&self) -> String {
        match self {
            Constraint::Location(l) => l.clone(),
            Constraint::Vm(v) => v.to_string(),
            Constraint::Replication(n) => n.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub name: String,
    pub contribution: String,
    pub services: Vec<String>,
    pub references: Vec<String>,
    pub constraints: Vec<Constraint>,
    pub elasticity: Option<ElasticityRule>,
}

impl ComponentSpec {
    pub fn new(name: impl Into<String>) -> Self {
        let name = name.into();
        ComponentSpec {
            contribution: format!("{name}.zip"),
            name,
            services: Vec::new(),
            references: Vec::new(),
            constraints: Vec::new(),
            elasticity: None,
        }
    }

    pub fn location(&self) -> Option<&str> {
        self.constraints.iter().find_map(|c| match c {
            Constraint::Location(l) => Some(l.as_str()),
            _ => None,
        })
    }

    /// Requested VM type; `small` when unannotated.
    pub fn vm_type(&self) -> VmType {
        self.constraints
            .iter()
            .find_map(|c| match c {
                Constraint::Vm(v) => Some(*v),
                _ => None,
            })
            .unwrap_or(VmType::Small)
    }

    /// Requested instance count; `1` when unannotated.
    pub fn replication(&self) -> u32 {
        self.constraints
            .iter()
            .find_map(|c| match c {
                Constraint::Replication(n) => Some(*n),
                _ => None,
            })
            .unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wire {
    pub source_component: String,
    pub reference: String,
    pub target_component: String,
    pub target_service: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplicationManifest {
    pub name: String,
    pub components: Vec<ComponentSpec>,
    pub wires: Vec<Wire>,
}

impl ApplicationManifest {
    pub fn component(&self, name: &str) -> Option<&ComponentSpec> {
        self.components.iter().find(|c| c.name == name)
    }

    /// The component that receives external traffic: the first declared.
    pub fn entry_component(&self) -> &ComponentSpec {
        &self.components[0]
    }

    /// Checks the structural invariants. `parse_manifest` only returns
    /// manifests that pass.
    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.components.is_empty() {
            return Err(ManifestError::NoComponents);
        }
        let mut names = BTreeSet::new();
        for c in &self.components {
            if !names.insert(c.name.as_str()) {
                return Err(ManifestError::DuplicateComponent(c.name.clone()));
            }
            let mut seen = BTreeSet::new();
            for k in &c.constraints {
                if !seen.insert(k.name()) {
                    return Err(ManifestError::DuplicateConstraint {
                        component: c.name.clone(),
                        constraint: k.name().to_string(),
                    });
                }
                if let Constraint::Replication(0) = k {
                    return Err(invalid(
                        &c.name,
                        "replication",
                        "0",
                        "must be an integer >= 1",
                    ));
                }
                if let Constraint::Location(l) = k {
                    if l.trim().is_empty() {
                        return Err(invalid(&c.name, "location", l, "empty value"));
                    }
                }
            }
        }
        for w in &self.wires {
            let resolves = self
                .component(&w.target_component)
                .is_some_and(|c| c.services.contains(&w.target_service));
            if !resolves {
                return Err(ManifestError::DanglingWire {
                    component: w.source_component.clone(),
                    reference: w.reference.clone(),
                    target: format!("{}/{}", w.target_component, w.target_service),
                });
            }
        }
        Ok(())
    }

    /// Renders the manifest back into descriptor form.
    pub fn to_descriptor(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "<composite name=\"{}\">", escape(&self.name));
        for c in &self.components {
            let _ = writeln!(out, "  <component name=\"{}\">", escape(&c.name));
            let _ = writeln!(
                out,
                "    <implementation.contribution contribution=\"{}\"/>",
                escape(&c.contribution)
            );
            for s in &c.services {
                let _ = writeln!(out, "    <service name=\"{}\"/>", escape(s));
            }
            for r in &c.references {
                let target = self
                    .wires
                    .iter()
                    .find(|w| w.source_component == c.name && w.reference == *r)
                    .map(|w| format!("{}/{}", w.target_component, w.target_service));
                match target {
                    Some(t) => {
                        let _ = writeln!(
                            out,
                            "    <reference name=\"{}\" target=\"{}\"/>",
                            escape(r),
                            escape(&t)
                        );
                    }
                    None => {
                        let _ = writeln!(out, "    <reference name=\"{}\"/>", escape(r));
                    }
                }
            }
            for k in &c.constraints {
                let _ = writeln!(
                    out,
                    "    <property name=\"{}\">{}</property>",
                    k.name(),
                    escape(&k.value())
                );
            }
            if let Some(rule) = &c.elasticity {
                let _ = writeln!(
                    out,
                    "    <property name=\"elasticity\">{}</property>",
                    escape(&rule.to_string())
                );
            }
            out.push_str("  </component>\n");
        }
        out.push_str("</composite>\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn invalid(component: &str, property: &str, value: &str, reason: &str) -> ManifestError {
    ManifestError::InvalidProperty {
        component: component.to_string(),
        property: property.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn syntax(
    doc: &roxmltree::Document<'_>,
    node: roxmltree::Node<'_, '_>,
    message: impl Into<String>,
) -> ManifestError {
    let pos = doc.text_pos_at(node.range().start);
    ManifestError::Syntax {
        line: pos.row,
        column: pos.col,
        message: message.into(),
    }
}

fn required_attr<'a>(
    doc: &roxmltree::Document<'_>,
    node: roxmltree::Node<'a, '_>,
    attr: &str,
) -> Result<&'a str, ManifestError> {
    node.attribute(attr)
        .filter(|v| !v.trim().is_empty())
        .ok_or_else(|| {
            syntax(
                doc,
                node,
                format!(
                    "<{}> requires a non-empty `{attr}` attribute",
                    node.tag_name().name()
                ),
            )
        })
}

/// Parses and validates a descriptor document.
pub fn parse_manifest(text: &str) -> Result<ApplicationManifest, ManifestError> {
    let doc = roxmltree::Document::parse(text).map_err(|e| {
        let pos = e.pos();
        ManifestError::Syntax {
            line: pos.row,
            column: pos.col,
            message: e.to_string(),
        }
    })?;
    let root = doc.root_element();
    if root.tag_name().name() != "composite" {
        return Err(syntax(
            &doc,
            root,
            format!("expected <composite>, found <{}>", root.tag_name().name()),
        ));
    }
    let name = required_attr(&doc, root, "name")?.to_string();
    let mut components = Vec::new();
    let mut wires = Vec::new();

    for el in root.children().filter(|n| n.is_element()) {
        if el.tag_name().name() != "component" {
            return Err(syntax(
                &doc,
                el,
                format!("unexpected <{}> in <composite>", el.tag_name().name()),
            ));
        }
        let cname = required_attr(&doc, el, "name")?.to_string();
        let mut component = ComponentSpec::new(cname.clone());
        let mut contribution = None;

        for child in el.children().filter(|n| n.is_element()) {
            match child.tag_name().name() {
                "implementation.contribution" => {
                    if contribution.is_some() {
                        return Err(syntax(
                            &doc,
                            child,
                            "component declares more than one contribution",
                        ));
                    }
                    contribution = Some(required_attr(&doc, child, "contribution")?.to_string());
                }
                "service" => component
                    .services
                    .push(required_attr(&doc, child, "name")?.to_string()),
                "reference" => {
                    let rname = required_attr(&doc, child, "name")?.to_string();
                    if let Some(target) = child.attribute("target") {
                        let (tc, ts) = target
                            .split_once('/')
                            .filter(|(c, s)| !c.is_empty() && !s.is_empty())
                            .ok_or_else(|| {
                                syntax(
                                    &doc,
                                    child,
                                    format!(
                                        "reference target `{target}` is not `component/service`"
                                    ),
                                )
                            })?;
                        wires.push(Wire {
                            source_component: cname.clone(),
                            reference: rname.clone(),
                            target_component: tc.to_string(),
                            target_service: ts.to_string(),
                        });
                    }
                    component.references.push(rname);
                }
                "property" => {
                    let pname = required_attr(&doc, child, "name")?;
                    let value = child.text().unwrap_or("").trim();
                    apply_property(&mut component, pname, value)?;
                }
                other => {
                    return Err(syntax(
                        &doc,
                        child,
                        format!("unexpected <{other}> in <component>"),
                    ))
                }
            }
        }
        if let Some(c) = contribution {
            component.contribution = c;
        } else {
            return Err(syntax(
                &doc,
                el,
                format!("component `{cname}` has no <implementation.contribution>"),
            ));
        }
        components.push(component);
    }

    let manifest = ApplicationManifest {
        name,
        components,
        wires,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn apply_property(
    component: &mut ComponentSpec,
    name: &str,
    value: &str,
) -> Result<(), ManifestError> {
    let cname = component.name.clone();
    let constraint = match name {
        "location" => {
            if value.is_empty() {
                return Err(invalid(&cname, name, value, "empty value"));
            }
            Constraint::Location(value.to_string())
        }
        "vm" => Constraint::Vm(value.parse().map_err(|e: crate::fabric::UnknownVmType| {
            invalid(&cname, name, value, &e.to_string())
        })?),
        "replication" => {
            let n: u32 = value
                .parse()
                .ok()
                .filter(|n| *n >= 1)
                .ok_or_else(|| invalid(&cname, name, value, "must be an integer >= 1"))?;
            Constraint::Replication(n)
        }
        "elasticity" => {
            if component.elasticity.is_some() {
                return Err(ManifestError::DuplicateConstraint {
                    component: cname,
                    constraint: "elasticity".into(),
                });
            }
            component.elasticity = Some(parse_elasticity_rule(value)?);
            return Ok(());
        }
        other => {
            return Err(ManifestError::UnknownProperty {
                component: cname,
                name: other.to_string(),
            });
        }
    };
    if component
        .constraints
        .iter()
        .any(|c| c.name() == constraint.name())
    {
        return Err(ManifestError::DuplicateConstraint {
            component: cname,
            constraint: name.to_string(),
        });
    }
    component.constraints.push(constraint);
    Ok(())
}

/// The three-tier descriptor used throughout the examples and tests.
pub const THREE_TIER_DESCRIPTOR: &str = include_str!("../../scenarios/three-tier.composite");
