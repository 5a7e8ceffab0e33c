//! Elasticity rule grammar:
//!
//! ```text
//! rule      := ("Scaling out" | "Scaling in") "when" metric comparator quantity ["over" duration]
//! metric    := ResponseTime | RequestRate | CpuLoad
//! quantity  := number unit
//! ```
//!
//! Units are metric specific: `ms`, `s`, `min` for response time; `/s` or
//! `rps` (or none) for request rate; `%` (or none, as a fraction) for CPU.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ManifestError;

pub const DEFAULT_RULE_WINDOW: Duration = Duration::from_secs(10);

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    ResponseTime,
    RequestRate,
    CpuLoad,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::ResponseTime => "ResponseTime",
            Metric::RequestRate => "RequestRate",
            Metric::CpuLoad => "CpuLoad",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, ManifestError> {
        match s.to_ascii_lowercase().as_str() {
            "responsetime" => Ok(Metric::ResponseTime),
            "requestrate" => Ok(Metric::RequestRate),
            "cpuload" => Ok(Metric::CpuLoad),
            _ => Err(ManifestError::UnknownMetric(s.to_string())),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<=")]
    Le,
}

impl Comparator {
    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Comparator::Gt => lhs > rhs,
            Comparator::Lt => lhs < rhs,
            Comparator::Ge => lhs >= rhs,
            Comparator::Le => lhs <= rhs,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Comparator::Gt => ">",
            Comparator::Lt => "<",
            Comparator::Ge => ">=",
            Comparator::Le => "<=",
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Comparator {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, ManifestError> {
        match s {
            ">" => Ok(Comparator::Gt),
            "<" => Ok(Comparator::Lt),
            ">=" => Ok(Comparator::Ge),
            "<=" => Ok(Comparator::Le),
            _ => Err(ManifestError::RuleGrammar(format!(
                "expected a comparator, found `{s}`"
            ))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "ms")]
    Millis,
    #[serde(rename = "s")]
    Seconds,
    #[serde(rename = "min")]
    Minutes,
    #[serde(rename = "/s")]
    PerSecond,
    #[serde(rename = "%")]
    Percent,
    #[serde(rename = "")]
    None,
}

impl Unit {
    fn as_str(self) -> &'static str {
        match self {
            Unit::Millis => "ms",
            Unit::Seconds => "s",
            Unit::Minutes => "min",
            Unit::PerSecond => "/s",
            Unit::Percent => "%",
            Unit::None => "",
        }
    }

    fn parse(s: &str) -> Option<Unit> {
        Some(match s {
            "ms" => Unit::Millis,
            "s" | "sec" => Unit::Seconds,
            "m" | "min" => Unit::Minutes,
            "/s" | "rps" => Unit::PerSecond,
            "%" => Unit::Percent,
            "" => Unit::None,
            _ => return None,
        })
    }
}

/// A number with its written unit.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub value: f64,
    pub unit: Unit,
}

impl Quantity {
    fn parse(token: &str) -> Result<Quantity, ManifestError> {
        let split = token
            .char_indices()
            .find(|&(i, c)| !(c.is_ascii_digit() || c == '.' || (i == 0 && (c == '-' || c == '+'))))
            .map_or(token.len(), |(i, _)| i);
        let (num, unit) = token.split_at(split);
        let value: f64 = num.parse().map_err(|_| {
            ManifestError::RuleGrammar(format!("expected a number, found `{token}`"))
        })?;
        let unit = Unit::parse(unit.trim())
            .ok_or_else(|| ManifestError::RuleGrammar(format!("unknown unit in `{token}`")))?;
        Ok(Quantity { value, unit })
    }

    fn as_duration(self) -> Option<Duration> {
        let ms = match self.unit {
            Unit::Millis => self.value,
            Unit::Seconds => self.value * 1_000.0,
            Unit::Minutes => self.value * 60_000.0,
            _ => return None,
        };
        Some(Duration::from_micros((ms * 1_000.0).round() as u64))
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.value, self.unit.as_str())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleAction {
    ScaleOut,
    ScaleIn,
}

impl fmt::Display for ScaleAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleAction::ScaleOut => "scale-out",
            ScaleAction::ScaleIn => "scale-in",
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub metric: Metric,
    pub comparator: Comparator,
    pub threshold: Quantity,
    /// Aggregation window; `None` means [`DEFAULT_RULE_WINDOW`].
    pub window: Option<Quantity>,
}

/// Condition plus action.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticityRule {
    pub condition: Condition,
    pub action: ScaleAction,
}

impl ElasticityRule {
    /// Threshold in the metric's canonical unit: milliseconds for response
    /// time, requests per second for rate, a 0..1 fraction for CPU.
    pub fn threshold(&self) -> f64 {
        let q = self.condition.threshold;
        match (self.condition.metric, q.unit) {
            (Metric::ResponseTime, _) => q
                .as_duration()
                .map_or(q.value, |d| d.as_secs_f64() * 1_000.0),
            (Metric::CpuLoad, Unit::Percent) => q.value / 100.0,
            _ => q.value,
        }
    }

    pub fn window(&self) -> Duration {
        self.condition
            .window
            .and_then(Quantity::as_duration)
            .unwrap_or(DEFAULT_RULE_WINDOW)
    }
}

impl fmt::Display for ElasticityRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verb = match self.action {
            ScaleAction::ScaleOut => "Scaling out",
            ScaleAction::ScaleIn => "Scaling in",
        };
        let c = &self.condition;
        write!(
            f,
            "{verb} when {} {} {}",
            c.metric, c.comparator, c.threshold
        )?;
        if let Some(w) = c.window {
            write!(f, " over {w}")?;
        }
        Ok(())
    }
}

impl FromStr for ElasticityRule {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, ManifestError> {
        parse_elasticity_rule(s)
    }
}

fn grammar(msg: impl Into<String>) -> ManifestError {
    ManifestError::RuleGrammar(msg.into())
}

/// Splits `ResponseTime>4s` style input into separate tokens.
fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '>' || c == '<' {
            spaced.push(' ');
            spaced.push(c);
            if chars.peek() == Some(&'=') {
                spaced.push(chars.next().unwrap());
            }
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

/// Joins a number token with a detached unit token (`4 s`).
fn take_quantity(tokens: &[String], i: &mut usize) -> Result<Quantity, ManifestError> {
    let first = tokens.get(*i).ok_or_else(|| grammar("missing threshold"))?;
    *i += 1;
    if let Some(next) = tokens.get(*i) {
        if first.chars().last().is_some_and(|c| c.is_ascii_digit()) && Unit::parse(next).is_some() {
            *i += 1;
            return Quantity::parse(&format!("{first}{next}"));
        }
    }
    Quantity::parse(first)
}

pub fn parse_elasticity_rule(text: &str) -> Result<ElasticityRule, ManifestError> {
    let tokens = tokenize(text);
    let lower: Vec<String> = tokens.iter().map(|t| t.to_ascii_lowercase()).collect();
    let word = |i: usize| lower.get(i).map(String::as_str);

    if word(0) != Some("scaling") {
        return Err(grammar(
            "rule must start with `Scaling out` or `Scaling in`",
        ));
    }
    let action = match word(1) {
        Some("out") => ScaleAction::ScaleOut,
        Some("in") => ScaleAction::ScaleIn,
        _ => return Err(grammar("expected `out` or `in` after `Scaling`")),
    };
    if word(2) != Some("when") {
        return Err(grammar("expected `when`"));
    }
    let metric: Metric = tokens
        .get(3)
        .ok_or_else(|| grammar("missing metric"))?
        .parse()?;
    let comparator: Comparator = tokens
        .get(4)
        .ok_or_else(|| grammar("missing comparator"))?
        .parse()?;
    let mut i = 5;
    let threshold = take_quantity(&tokens, &mut i)?;
    check_unit(metric, threshold.unit)?;
    if threshold.value.is_nan() || threshold.value <= 0.0 {
        return Err(ManifestError::NonPositiveThreshold(threshold.value));
    }

    let window = match word(i) {
        None => None,
        Some("over") => {
            i += 1;
            let w = take_quantity(&tokens, &mut i)?;
            let d = w
                .as_duration()
                .ok_or_else(|| grammar(format!("window `{w}` is not a duration")))?;
            if d.is_zero() {
                return Err(ManifestError::NonPositiveWindow);
            }
            Some(w)
        }
        Some(other) => return Err(grammar(format!("unexpected `{other}`"))),
    };
    if i != tokens.len() {
        return Err(grammar(format!(
            "trailing input `{}`",
            tokens[i..].join(" ")
        )));
    }
    Ok(ElasticityRule {
        condition: Condition {
            metric,
            comparator,
            threshold,
            window,
        },
        action,
    })
}

fn check_unit(metric: Metric, unit: Unit) -> Result<(), ManifestError> {
    let ok = match metric {
        Metric::ResponseTime => matches!(unit, Unit::Millis | Unit::Seconds | Unit::Minutes),
        Metric::RequestRate => matches!(unit, Unit::PerSecond | Unit::None),
        Metric::CpuLoad => matches!(unit, Unit::Percent | Unit::None),
    };
    if ok {
        Ok(())
    } else {
        Err(grammar(format!(
            "unit `{}` does not apply to {metric}",
            unit.as_str()
        )))
    }
}
