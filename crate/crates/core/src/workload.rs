//! The workload manager: event correlation, drift indicators, the
//! inter-arrival EWMA and threshold-based elasticity checks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::manifest::{Comparator, ElasticityRule, Metric, ScaleAction};
use crate::telemetry::MetricEvent;
use crate::time::duration_ms_f64;
use crate::SimTime;

/// Smoothing factor recommended for TCP round-trip estimation.
pub const DEFAULT_ALPHA: f64 = 0.125;
/// Underload fires when the inter-arrival estimate exceeds this multiple
/// of the overload threshold.
pub const UNDERLOAD_FACTOR: f64 = 10.0;
/// Relative margin an estimate must clear before an overload or underload
/// episode ends.
pub const HYSTERESIS: f64 = 0.1;
/// How long a new load state must persist before it is reported.
pub const DEFAULT_LOAD_SUSTAIN: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorkloadError {
    #[error("arrival at {arrival} precedes the last arrival at {last}")]
    ClockRegression { arrival: SimTime, last: SimTime },
    #[error("smoothing factor must lie strictly between 0 and 1, got {0}")]
    InvalidAlpha(f64),
}

/// Exponentially weighted moving average of request inter-arrival gaps.
///
/// Each arrival after the first yields a gap `g`; the estimate becomes
/// `(1 - alpha) * previous + alpha * g`. The first gap seeds the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EwmaState {
    /// Current estimate in milliseconds; `None` until two arrivals.
    pub f_prev: Option<f64>,
    pub last_arrival: Option<SimTime>,
    pub alpha: f64,
}

impl Default for EwmaState {
    fn default() -> Self {
        EwmaState {
            f_prev: None,
            last_arrival: None,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl EwmaState {
    pub fn with_alpha(alpha: f64) -> Result<Self, WorkloadError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(WorkloadError::InvalidAlpha(alpha));
        }
        Ok(EwmaState {
            alpha,
            ..Default::default()
        })
    }

    pub fn estimate(&self) -> Option<f64> {
        self.f_prev
    }

    /// Folds one gap into the estimate.
    pub fn step(f_prev: f64, gap_ms: f64, alpha: f64) -> f64 {
        (1.0 - alpha) * f_prev + alpha * gap_ms
    }
}

/// Records a request arrival.
pub fn ewma_update(state: EwmaState, arrival: SimTime) -> Result<EwmaState, WorkloadError> {
    let Some(last) = state.last_arrival else {
        return Ok(EwmaState {
            last_arrival: Some(arrival),
            ..state
        });
    };
    if arrival < last {
        return Err(WorkloadError::ClockRegression { arrival, last });
    }
    let gap = duration_ms_f64(arrival - last);
    let f = match state.f_prev {
        None => gap,
        Some(prev) => EwmaState::step(prev, gap, state.alpha),
    };
    Ok(EwmaState {
        f_prev: Some(f),
        last_arrival: Some(arrival),
        alpha: state.alpha,
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Overload,
    Underload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorCondition {
    pub metric: Metric,
    pub comparator: Comparator,
    /// In the metric's canonical unit (ms, requests/s, 0..1 fraction).
    pub threshold: f64,
    pub sustain_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftIndicator {
    pub id: String,
    /// An application name, or `application/component`.
    pub subject: String,
    pub condition: IndicatorCondition,
    pub severity: Severity,
}

impl DriftIndicator {
    pub fn sustain(&self) -> Duration {
        Duration::from_millis(self.condition.sustain_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub count: usize,
    pub mean: f64,
    pub max: f64,
}

impl WindowSummary {
    fn of(values: impl IntoIterator<Item = f64>) -> Option<WindowSummary> {
        let mut count = 0;
        let mut sum = 0.0;
        let mut max = f64::NEG_INFINITY;
        for v in values {
            count += 1;
            sum += v;
            max = max.max(v);
        }
        (count > 0).then(|| WindowSummary {
            count,
            mean: sum / count as f64,
            max,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftAlert {
    pub indicator: String,
    pub subject: String,
    pub severity: Severity,
    pub fired_at: SimTime,
    /// When the condition started holding; identifies the episode.
    pub episode_start: SimTime,
    pub evidence: WindowSummary,
}

/// Anything the workload manager receives or emits that may be duplicated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WmEvent {
    Metric(MetricEvent),
    Alert(DriftAlert),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum CorrelationKey {
    Metric {
        subject: String,
        timestamp: SimTime,
    },
    Alert {
        indicator: String,
        subject: String,
        episode: SimTime,
    },
}

impl WmEvent {
    fn key(&self) -> CorrelationKey {
        match self {
            WmEvent::Metric(m) => CorrelationKey::Metric {
                subject: m.instance.clone(),
                timestamp: m.timestamp,
            },
            WmEvent::Alert(a) => CorrelationKey::Alert {
                indicator: a.indicator.clone(),
                subject: a.subject.clone(),
                episode: a.episode_start,
            },
        }
    }
}

/// Collapses duplicates, keeping the first occurrence in input order.
///
/// Samples are identified by `(instance, timestamp)`; every metric of a
/// sample shares that key. Alerts are identified by indicator, subject and
/// episode.
pub fn correlate(batch: Vec<WmEvent>) -> Vec<WmEvent> {
    let mut seen = BTreeSet::new();
    batch.into_iter().filter(|e| seen.insert(e.key())).collect()
}

pub fn metric_value(event: &MetricEvent, metric: Metric) -> f64 {
    match metric {
        Metric::ResponseTime => event.response_time_ms,
        Metric::RequestRate => event.request_count as f64,
        Metric::CpuLoad => event.cpu_load,
    }
}

/// True when an event belongs to `subject` (`app` or `app/component`).
pub fn subject_matches(subject: &str, event: &MetricEvent) -> bool {
    match subject.split_once('/') {
        Some((app, component)) => event.application == app && event.component == component,
        None => event.application == subject,
    }
}

/// Start of the run of consecutive samples, ending with the latest sample
/// at or before `now`, on which the condition holds. `None` when the latest
/// sample does not satisfy it.
pub fn current_episode(
    window: &[MetricEvent],
    indicator: &DriftIndicator,
    now: SimTime,
) -> Option<SimTime> {
    let c = &indicator.condition;
    let mut start = None;
    for e in window
        .iter()
        .rev()
        .filter(|e| e.timestamp <= now && subject_matches(&indicator.subject, e))
    {
        if c.comparator.holds(metric_value(e, c.metric), c.threshold) {
            start = Some(e.timestamp);
        } else {
            break;
        }
    }
    start
}

/// Stateful drift detection with one alert per sustained episode.
#[derive(Debug, Default, Clone)]
pub struct DriftDetector {
    latched: BTreeMap<String, SimTime>,
}

impl DriftDetector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Evaluates every indicator against a time-ordered window.
    pub fn evaluate(
        &mut self,
        window: &[MetricEvent],
        indicators: &[DriftIndicator],
        now: SimTime,
    ) -> Vec<DriftAlert> {
        let mut alerts = Vec::new();
        for ind in indicators {
            let Some(start) = current_episode(window, ind, now) else {
                self.latched.remove(&ind.id);
                continue;
            };
            if self.latched.get(&ind.id) == Some(&start) {
                continue;
            }
            if now - start < ind.sustain() {
                continue;
            }
            let evidence = WindowSummary::of(
                window
                    .iter()
                    .filter(|e| {
                        e.timestamp >= start
                            && e.timestamp <= now
                            && subject_matches(&ind.subject, e)
                    })
                    .map(|e| metric_value(e, ind.condition.metric)),
            )
            .expect("episode contains at least one sample");
            self.latched.insert(ind.id.clone(), start);
            alerts.push(DriftAlert {
                indicator: ind.id.clone(),
                subject: ind.subject.clone(),
                severity: ind.severity,
                fired_at: now,
                episode_start: start,
                evidence,
            });
        }
        alerts
    }
}

/// Where a scale decision came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum DecisionSource {
    Rule(String),
    Indicator(String),
    Ewma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleDecision {
    pub application: String,
    pub component: String,
    pub action: ScaleAction,
    pub source: DecisionSource,
    pub observed: f64,
    pub threshold: f64,
    pub at: SimTime,
    /// Start of the episode that produced the decision.
    pub episode: SimTime,
}

/// Windowed aggregate of a rule's metric over `(now - window, now]`.
///
/// Response time and CPU are arithmetic means over samples; request rate is
/// the total count divided by the window length.
pub fn windowed_value(rule: &ElasticityRule, window: &[&MetricEvent], now: SimTime) -> Option<f64> {
    let from = now.saturating_sub(rule.window());
    let in_window: Vec<&MetricEvent> = window
        .iter()
        .copied()
        .filter(|e| e.timestamp > from && e.timestamp <= now)
        .collect();
    if in_window.is_empty() {
        return None;
    }
    let metric = rule.condition.metric;
    Some(match metric {
        Metric::RequestRate => {
            in_window
                .iter()
                .map(|e| e.request_count as f64)
                .sum::<f64>()
                / rule.window().as_secs_f64()
        }
        _ => {
            WindowSummary::of(in_window.iter().map(|e| metric_value(e, metric)))
                .expect("non-empty")
                .mean
        }
    })
}

/// Evaluates an elasticity rule for one component.
pub fn check_elasticity(
    rule: &ElasticityRule,
    application: &str,
    component: &str,
    window: &[MetricEvent],
    now: SimTime,
) -> Option<ScaleDecision> {
    let own: Vec<&MetricEvent> = window
        .iter()
        .filter(|e| e.application == application && e.component == component)
        .collect();
    let observed = windowed_value(rule, &own, now)?;
    let threshold = rule.threshold();
    rule.condition
        .comparator
        .holds(observed, threshold)
        .then(|| ScaleDecision {
            application: application.to_string(),
            component: component.to_string(),
            action: rule.action,
            source: DecisionSource::Rule(format!("{application}/{component}")),
            observed,
            threshold,
            at: now,
            episode: now,
        })
}

/// Per-application thresholds for the arrival-rate loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadThresholds {
    /// Overload when the inter-arrival estimate falls below this (ms).
    pub overload_gap_ms: f64,
    /// Underload when the estimate exceeds this (ms).
    pub underload_gap_ms: f64,
}

impl LoadThresholds {
    /// Arrivals faster than aggregate service capacity overload the
    /// application; arrivals ten times slower underload it.
    pub fn from_capacity(service_time_ms: f64, instances: usize) -> Self {
        let overload = service_time_ms / instances.max(1) as f64;
        LoadThresholds {
            overload_gap_ms: overload,
            underload_gap_ms: overload * UNDERLOAD_FACTOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadState {
    Normal,
    Overload,
    Underload,
}

#[derive(Debug, Clone)]
struct AppLoad {
    entry_component: String,
    ewma: EwmaState,
    service_time_ms: f64,
    instances: usize,
    overrides: Option<LoadThresholds>,
    state: LoadState,
    episode_start: SimTime,
    candidate: Option<(LoadState, SimTime)>,
}

impl AppLoad {
    fn thresholds(&self) -> LoadThresholds {
        self.overrides
            .unwrap_or_else(|| LoadThresholds::from_capacity(self.service_time_ms, self.instances))
    }
}

#[derive(Debug, Clone)]
struct RuleState {
    application: String,
    component: String,
    rule: ElasticityRule,
    latched: bool,
}

/// Output of the workload manager towards the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WmOutput {
    Alert(DriftAlert),
    Decision(ScaleDecision),
}

/// The workload manager actor.
#[derive(Debug, Clone)]
pub struct WorkloadManager {
    alpha: f64,
    apps: BTreeMap<String, AppLoad>,
    rules: Vec<RuleState>,
    indicators: Vec<DriftIndicator>,
    detector: DriftDetector,
    window: VecDeque<MetricEvent>,
    seen: BTreeSet<(String, SimTime)>,
    retention: Duration,
    elasticity: bool,
    sustain: Duration,
}

impl WorkloadManager {
    pub fn new(alpha: f64, elasticity: bool) -> Self {
        WorkloadManager {
            alpha,
            apps: BTreeMap::new(),
            rules: Vec::new(),
            indicators: Vec::new(),
            detector: DriftDetector::new(),
            window: VecDeque::new(),
            seen: BTreeSet::new(),
            retention: Duration::from_secs(60),
            elasticity,
            sustain: DEFAULT_LOAD_SUSTAIN,
        }
    }

    /// Sets how long a load state must persist before it takes effect.
    pub fn with_load_sustain(mut self, sustain: Duration) -> Self {
        self.sustain = sustain;
        self
    }

    pub fn elasticity_enabled(&self) -> bool {
        self.elasticity
    }

    pub fn track_application(
        &mut self,
        application: &str,
        entry_component: &str,
        service_time_ms: f64,
        overrides: Option<LoadThresholds>,
    ) {
        self.apps.insert(
            application.to_string(),
            AppLoad {
                entry_component: entry_component.to_string(),
                ewma: EwmaState {
                    alpha: self.alpha,
                    ..Default::default()
                },
                service_time_ms,
                instances: 1,
                overrides,
                state: LoadState::Normal,
                episode_start: SimTime::ZERO,
                candidate: None,
            },
        );
    }

    pub fn add_rule(&mut self, application: &str, component: &str, rule: ElasticityRule) {
        self.retention = self.retention.max(rule.window() * 2);
        self.rules.push(RuleState {
            application: application.to_string(),
            component: component.to_string(),
            rule,
            latched: false,
        });
    }

    pub fn add_indicator(&mut self, indicator: DriftIndicator) {
        self.retention = self.retention.max(indicator.sustain() * 2);
        self.indicators.push(indicator);
    }

    /// Updates the serving capacity used by the arrival-rate thresholds.
    pub fn set_instances(&mut self, application: &str, instances: usize) {
        if let Some(a) = self.apps.get_mut(application) {
            a.instances = instances;
        }
    }

    pub fn ewma(&self, application: &str) -> Option<&EwmaState> {
        self.apps.get(application).map(|a| &a.ewma)
    }

    pub fn load_state(&self, application: &str) -> Option<LoadState> {
        self.apps.get(application).map(|a| a.state)
    }

    pub fn window(&self) -> impl Iterator<Item = &MetricEvent> {
        self.window.iter()
    }

    /// Feeds one request arrival from the balancer into the EWMA and
    /// reports a transition into overload or underload.
    pub fn on_arrival(&mut self, application: &str, at: SimTime) -> Vec<WmOutput> {
        let elasticity = self.elasticity;
        let Some(app) = self.apps.get_mut(application) else {
            return Vec::new();
        };
        app.ewma = match ewma_update(app.ewma, at) {
            Ok(s) => s,
            Err(_) => return Vec::new(),
        };
        let Some(estimate) = app.ewma.estimate() else {
            return Vec::new();
        };
        let t = app.thresholds();
        let next = if estimate < t.overload_gap_ms {
            LoadState::Overload
        } else if estimate > t.underload_gap_ms {
            LoadState::Underload
        } else {
            match app.state {
                LoadState::Overload if estimate < t.overload_gap_ms * (1.0 + HYSTERESIS) => {
                    LoadState::Overload
                }
                LoadState::Underload if estimate > t.underload_gap_ms * (1.0 - HYSTERESIS) => {
                    LoadState::Underload
                }
                _ => LoadState::Normal,
            }
        };
        if next == app.state {
            app.candidate = None;
            return Vec::new();
        }
        let since = match app.candidate {
            Some((state, since)) if state == next => since,
            _ => at,
        };
        if at.since(since) < self.sustain {
            app.candidate = Some((next, since));
            return Vec::new();
        }
        app.candidate = None;
        app.state = next;
        app.episode_start = since;
        let (severity, action, threshold) = match next {
            LoadState::Normal => return Vec::new(),
            LoadState::Overload => (Severity::Overload, ScaleAction::ScaleOut, t.overload_gap_ms),
            LoadState::Underload => (
                Severity::Underload,
                ScaleAction::ScaleIn,
                t.underload_gap_ms,
            ),
        };
        let alert = DriftAlert {
            indicator: "inter-arrival".into(),
            subject: application.to_string(),
            severity,
            fired_at: at,
            episode_start: since,
            evidence: WindowSummary {
                count: 1,
                mean: estimate,
                max: estimate,
            },
        };
        let mut out = vec![WmOutput::Alert(alert)];
        if elasticity {
            out.push(WmOutput::Decision(ScaleDecision {
                application: application.to_string(),
                component: app.entry_component.clone(),
                action,
                source: DecisionSource::Ewma,
                observed: estimate,
                threshold,
                at,
                episode: since,
            }));
        }
        out
    }

    /// Accepts a delivered metric batch, dropping samples already seen.
    /// Returns how many samples were new.
    pub fn ingest(&mut self, batch: Vec<MetricEvent>) -> usize {
        let batch = correlate(batch.into_iter().map(WmEvent::Metric).collect());
        let mut fresh = 0;
        for e in batch {
            let WmEvent::Metric(m) = e else { continue };
            if self.seen.insert((m.instance.clone(), m.timestamp)) {
                let pos = self.window.partition_point(|x| x.timestamp <= m.timestamp);
                self.window.insert(pos, m);
                fresh += 1;
            }
        }
        fresh
    }

    /// Periodic evaluation of rules and indicators.
    pub fn tick(&mut self, now: SimTime) -> Vec<WmOutput> {
        let cutoff = now.saturating_sub(self.retention);
        while self.window.front().is_some_and(|e| e.timestamp < cutoff) {
            let e = self.window.pop_front().expect("non-empty");
            self.seen.remove(&(e.instance, e.timestamp));
        }
        let window: Vec<MetricEvent> = self.window.iter().cloned().collect();
        let mut out = Vec::new();

        for alert in self.detector.evaluate(&window, &self.indicators, now) {
            let indicator = self
                .indicators
                .iter()
                .find(|i| i.id == alert.indicator)
                .expect("known indicator");
            out.push(WmOutput::Alert(alert.clone()));
            let action = match alert.severity {
                Severity::Overload => ScaleAction::ScaleOut,
                Severity::Underload => ScaleAction::ScaleIn,
                Severity::Info => continue,
            };
            if !self.elasticity {
                continue;
            }
            let (application, component) = match indicator.subject.split_once('/') {
                Some((a, c)) => (a.to_string(), c.to_string()),
                None => match self.apps.get(&indicator.subject) {
                    Some(app) => (indicator.subject.clone(), app.entry_component.clone()),
                    None => continue,
                },
            };
            out.push(WmOutput::Decision(ScaleDecision {
                application,
                component,
                action,
                source: DecisionSource::Indicator(alert.indicator.clone()),
                observed: alert.evidence.mean,
                threshold: indicator.condition.threshold,
                at: now,
                episode: alert.episode_start,
            }));
        }

        if self.elasticity {
            for r in &mut self.rules {
                match check_elasticity(&r.rule, &r.application, &r.component, &window, now) {
                    Some(decision) if !r.latched => {
                        r.latched = true;
                        out.push(WmOutput::Decision(decision));
                    }
                    Some(_) => {}
                    None => r.latched = false,
                }
            }
        }
        out
    }
}
