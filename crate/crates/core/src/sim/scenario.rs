//! Scenario files: TOML with a `version = 1` header. Every module's tunables
//! live in their own table and default when omitted.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterConfig;
use crate::demand_eval::DemandConfig;
use crate::feedback_eval::VerificationConfig;
use crate::model::{
    Credential, DomainId, DomainProfile, NodeId, PolicySet, QosVector, RawCriteria, Scope,
    SecurityAttributes, SECURITY_ATTRIBUTE_COUNT,
};
use crate::security_mgmt::{normalize_attributes, ReferenceScales, SecurityWeights};
use crate::trust_eval::TrustConfig;

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("bad override `{key}`: {reason}")]
    Override { key: String, reason: String },
    #[error("scenario has {} violation(s):\n  {}", .0.len(), .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub duration: f64,
    #[serde(default)]
    pub grid_policies: Vec<String>,
    #[serde(default)]
    pub trusted_issuers: Vec<String>,
    #[serde(default)]
    pub domains: Vec<DomainSpec>,
    #[serde(default)]
    pub security: SecurityConfig,
    #[serde(default)]
    pub feedback: VerificationConfig,
    #[serde(default)]
    pub demand: DemandConfig,
    #[serde(default)]
    pub trust: TrustConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub events: Vec<EventSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecurityConfig {
    /// Relative attribute weights; normalised before use.
    pub weights: [f64; SECURITY_ATTRIBUTE_COUNT],
    pub scales: ReferenceScales,
}

impl Default for SecurityConfig {
    fn default() -> Self {
        Self {
            weights: [1.0; SECURITY_ATTRIBUTE_COUNT],
            scales: ReferenceScales::default(),
        }
    }
}

impl SecurityConfig {
    pub fn weights(&self) -> SecurityWeights {
        SecurityWeights::new(self.weights).unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: String,
    pub nodes: Vec<u32>,
    pub dtm_id: Option<u32>,
    #[serde(default)]
    pub policies: Vec<String>,
    pub credential: CredentialSpec,
    pub security: SecuritySpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CredentialSpec {
    pub issuer: String,
    pub token: String,
    #[serde(default = "yes")]
    pub valid: bool,
}

fn yes() -> bool {
    true
}

/// Either the six attribute values directly or the raw criteria they are
/// derived from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecuritySpec {
    pub sa: Option<[f64; SECURITY_ATTRIBUTE_COUNT]>,
    pub raw: Option<RawCriteria>,
}

impl SecuritySpec {
    pub fn resolve(&self, scales: &ReferenceScales) -> Result<SecurityAttributes, String> {
        match (&self.sa, &self.raw) {
            (Some(sa), None) => SecurityAttributes::new(*sa).map_err(|e| e.to_string()),
            (None, Some(raw)) => normalize_attributes(raw, scales).map_err(|e| e.to_string()),
            _ => Err("exactly one of `sa` and `raw` must be given".to_string()),
        }
    }
}

impl DomainSpec {
    pub fn to_profile(&self, scales: &ReferenceScales) -> Result<DomainProfile, String> {
        let dtm = self.dtm_id.ok_or_else(|| "dtm_id is missing".to_string())?;
        let profile = DomainProfile {
            domain_id: DomainId::new(self.id.clone()),
            policies: PolicySet::from_predicates(self.policies.iter().cloned()),
            security: self.security.resolve(scales)?,
            node_ids: self.nodes.iter().copied().map(NodeId).collect(),
            dtm_id: NodeId(dtm),
            credential: Credential {
                issuer: self.credential.issuer.clone(),
                token: self.credential.token.clone(),
                valid: self.credential.valid,
            },
        };
        profile.validate().map_err(|e| e.to_string())?;
        Ok(profile)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ArrivalSpec {
    Poisson { rate: f64 },
    Fixed { interval: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub arrivals: ArrivalSpec,
    /// Time of the first possible arrival.
    pub start: f64,
    pub max_transactions: Option<u64>,
    /// Delay between allocation and the client's feedback.
    pub service_time: f64,
    /// Half-width of the uniform rating noise.
    pub noise: f64,
    pub clients: Vec<ClientSpec>,
    pub providers: Vec<ProviderSpec>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            arrivals: ArrivalSpec::Poisson { rate: 1.0 },
            start: 0.0,
            max_transactions: None,
            service_time: 1.0,
            noise: 0.05,
            clients: Vec::new(),
            providers: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub id: String,
    pub home: String,
    pub target: String,
    #[serde(default = "one")]
    pub weight: f64,
    pub demand: DemandSpec,
    /// Chance that the client rates a transaction 0 on every parameter,
    /// whatever was delivered.
    #[serde(default)]
    pub outlier_probability: f64,
    #[serde(default = "compute")]
    pub service_type: String,
}

fn one() -> f64 {
    1.0
}

fn compute() -> String {
    "compute".to_string()
}

/// Demanded percentages per QoS parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DemandSpec {
    Constant { dp: QosVector },
    Uniform { low: QosVector, high: QosVector },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSpec {
    pub node: u32,
    pub quality: QosVector,
    #[serde(default)]
    pub drift: Vec<DriftStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftStep {
    pub at: f64,
    pub quality: QosVector,
}

/// True delivered quality of a provider over time.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorProfile {
    pub quality: QosVector,
    pub drift: Vec<DriftStep>,
}

impl BehaviorProfile {
    pub fn quality_at(&self, t: f64) -> QosVector {
        self.drift
            .iter()
            .rev()
            .find(|s| s.at <= t)
            .map_or(self.quality, |s| s.quality)
    }
}

impl From<&ProviderSpec> for BehaviorProfile {
    fn from(p: &ProviderSpec) -> Self {
        Self {
            quality: p.quality,
            drift: p.drift.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum EventSpec {
    Crash {
        at: f64,
        node: u32,
    },
    Recover {
        at: f64,
        node: u32,
    },
    JoinDomain {
        at: f64,
        domain: DomainSpec,
    },
    SecurityUpdate {
        at: f64,
        domain: String,
        security: SecuritySpec,
        #[serde(default = "intra")]
        scope: Scope,
    },
}

fn intra() -> Scope {
    Scope::IntraDomain
}

impl EventSpec {
    pub fn at(&self) -> f64 {
        match self {
            EventSpec::Crash { at, .. }
            | EventSpec::Recover { at, .. }
            | EventSpec::JoinDomain { at, .. }
            | EventSpec::SecurityUpdate { at, .. } => *at,
        }
    }
}

impl Scenario {
    /// Parses and validates a scenario, applying `key=value` overrides (dotted
    /// paths, numeric segments index arrays) first.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self, ScenarioError> {
        let scenario: Scenario = if overrides.is_empty() {
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?
        } else {
            let mut table: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| ScenarioError::Parse(e.to_string()))?;
            for (key, value) in overrides {
                apply_override(&mut table, key, value)?;
            }
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| ScenarioError::Parse(e.to_string()))?
        };
        let violations = scenario.validate();
        if violations.is_empty() {
            Ok(scenario)
        } else {
            Err(ScenarioError::Invalid(violations))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    /// Every broken invariant, each prefixed with the offending field path.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.version != SCENARIO_VERSION {
            v.push(format!(
                "version: expected {SCENARIO_VERSION}, found {}",
                self.version
            ));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            v.push(format!(
                "duration: must be positive, found {}",
                self.duration
            ));
        }
        let mut seen = BTreeSet::new();
        for (i, p) in self.grid_policies.iter().enumerate() {
            if !seen.insert(p) {
                v.push(format!("grid_policies[{i}]: duplicate predicate `{p}`"));
            }
        }
        if self.domains.is_empty() {
            v.push("domains: at least one domain is required".to_string());
        }

        let mut domain_ids = BTreeSet::new();
        let mut nodes = BTreeSet::new();
        let joining = self.events.iter().enumerate().filter_map(|(i, e)| match e {
            EventSpec::JoinDomain { domain, .. } => {
                Some((format!("events[{i}].domain"), domain, true))
            }
            _ => None,
        });
        let initial = self
            .domains
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("domains[{i}]"), d, false));
        for (path, d, is_join) in initial.chain(joining) {
            // A refused join may legitimately reuse an id or node.
            if !domain_ids.insert(d.id.clone()) && !is_join {
                v.push(format!("{path}.id: duplicate domain `{}`", d.id));
            }
            if !DomainId::new(d.id.clone()).is_well_formed() {
                v.push(format!("{path}.id: must be non-empty without whitespace"));
            }
            if d.nodes.is_empty() {
                v.push(format!("{path}.nodes: must not be empty"));
            }
            for n in &d.nodes {
                if !nodes.insert(*n) && !is_join {
                    v.push(format!(
                        "{path}.nodes: node {n} belongs to more than one domain"
                    ));
                }
            }
            match d.dtm_id {
                None => v.push(format!("{path}.dtm_id: missing")),
                Some(dtm) if !d.nodes.contains(&dtm) => v.push(format!(
                    "{path}.dtm_id: node {dtm} is not among the domain's nodes"
                )),
                _ => {}
            }
            if d.credential.issuer.trim().is_empty() || d.credential.token.trim().is_empty() {
                v.push(format!(
                    "{path}.credential: issuer and token must be non-empty"
                ));
            }
            if let Err(e) = d.security.resolve(&self.security.scales) {
                v.push(format!("{path}.security: {e}"));
            }
        }

        if SecurityWeights::new(self.security.weights).is_err() {
            v.push("security.weights: must be non-negative with a positive sum".to_string());
        }
        if let Err(e) = self.security.scales.validate() {
            v.push(format!("security.scales: {e}"));
        }
        v.extend(self.feedback.validate());
        v.extend(self.demand.validate());
        v.extend(self.trust.validate());
        v.extend(self.cluster.validate());
        self.validate_workload(&domain_ids, &nodes, &mut v);

        for (i, e) in self.events.iter().enumerate() {
            let at = e.at();
            if !(at >= 0.0 && at <= self.duration) {
                v.push(format!("events[{i}].at: {at} lies outside [0, duration]"));
            }
            match e {
                EventSpec::Crash { node, .. } | EventSpec::Recover { node, .. }
                    if !nodes.contains(node) =>
                {
                    v.push(format!("events[{i}].node: unknown node {node}"));
                }
                EventSpec::SecurityUpdate {
                    domain, security, ..
                } => {
                    if !domain_ids.contains(domain) {
                        v.push(format!("events[{i}].domain: unknown domain `{domain}`"));
                    }
                    if let Err(e) = security.resolve(&self.security.scales) {
                        v.push(format!("events[{i}].security: {e}"));
                    }
                }
                _ => {}
            }
        }
        v
    }

    fn validate_workload(
        &self,
        domains: &BTreeSet<String>,
        nodes: &BTreeSet<u32>,
        v: &mut Vec<String>,
    ) {
        let w = &self.workload;
        match w.arrivals {
            ArrivalSpec::Poisson { rate } if !(rate > 0.0 && rate.is_finite()) => {
                v.push("workload.arrivals.rate: must be positive".to_string())
            }
            ArrivalSpec::Fixed { interval } if !(interval > 0.0 && interval.is_finite()) => {
                v.push("workload.arrivals.interval: must be positive".to_string())
            }
            _ => {}
        }
        if !(w.start >= 0.0) {
            v.push("workload.start: must be >= 0".to_string());
        }
        if !(w.service_time >= 0.0 && w.service_time.is_finite()) {
            v.push("workload.service_time: must be >= 0".to_string());
        }
        if !(0.0..=1.0).contains(&w.noise) {
            v.push("workload.noise: must lie in [0, 1]".to_string());
        }
        let mut ids = BTreeSet::new();
        for (i, c) in w.clients.iter().enumerate() {
            let path = format!("workload.clients[{i}]");
            if !ids.insert(&c.id) {
                v.push(format!("{path}.id: duplicate client `{}`", c.id));
            }
            for (field, d) in [("home", &c.home), ("target", &c.target)] {
                if !domains.contains(d) {
                    v.push(format!("{path}.{field}: unknown domain `{d}`"));
                }
            }
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                v.push(format!("{path}.weight: must be >= 0"));
            }
            if !(0.0..=1.0).contains(&c.outlier_probability) {
                v.push(format!("{path}.outlier_probability: must lie in [0, 1]"));
            }
            let percent = |x: &QosVector| x.iter().all(|p| (0.0..=100.0).contains(p));
            match &c.demand {
                DemandSpec::Constant { dp } => {
                    if !percent(dp) {
                        v.push(format!("{path}.demand.dp: entries must lie in [0, 100]"));
                    }
                    if dp.iter().sum::<f64>() <= 0.0 {
                        v.push(format!(
                            "{path}.demand.dp: at least one entry must be positive"
                        ));
                    }
                }
                DemandSpec::Uniform { low, high } => {
                    if !percent(low) || !percent(high) {
                        v.push(format!("{path}.demand: bounds must lie in [0, 100]"));
                    }
                    if low.iter().zip(high).any(|(l, h)| l > h) {
                        v.push(format!("{path}.demand: low must not exceed high"));
                    }
                    if high.iter().sum::<f64>() <= 0.0 {
                        v.push(format!(
                            "{path}.demand.high: at least one entry must be positive"
                        ));
                    }
                }
            }
        }
        if !w.clients.is_empty() && w.clients.iter().all(|c| c.weight <= 0.0) {
            v.push("workload.clients: at least one client needs a positive weight".to_string());
        }
        let mut providers = BTreeSet::new();
        for (i, p) in w.providers.iter().enumerate() {
            let path = format!("workload.providers[{i}]");
            if !providers.insert(p.node) {
                v.push(format!("{path}.node: duplicate provider {}", p.node));
            }
            if !nodes.contains(&p.node) {
                v.push(format!("{path}.node: node {} belongs to no domain", p.node));
            }
            let unit = |q: &QosVector| q.iter().all(|x| (0.0..=1.0).contains(x));
            if !unit(&p.quality) {
                v.push(format!("{path}.quality: entries must lie in [0, 1]"));
            }
            for (j, s) in p.drift.iter().enumerate() {
                if !unit(&s.quality) {
                    v.push(format!(
                        "{path}.drift[{j}].quality: entries must lie in [0, 1]"
                    ));
                }
                if j > 0 && s.at < p.drift[j - 1].at {
                    v.push(format!("{path}.drift[{j}].at: steps must be in time order"));
                }
            }
        }
    }
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), ScenarioError> {
    let err = |reason: String| ScenarioError::Override {
        key: key.to_string(),
        reason,
    };
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(err("empty path segment".to_string()));
    }
    let (last, parents) = segments.split_last().expect("non-empty path");
    let cursor = table;
    let mut slot: Option<&mut toml::Value> = None;
    for seg in parents {
        let next = match slot.take() {
            None => cursor
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
            Some(v) => descend(v, seg).map_err(err)?,
        };
        slot = Some(next);
    }
    match slot {
        None => {
            cursor.insert(last.to_string(), value);
        }
        Some(v) => {
            *descend(v, last).map_err(err)? = value;
        }
    }
    Ok(())
}

fn descend<'a>(v: &'a mut toml::Value, seg: &str) -> Result<&'a mut toml::Value, String> {
    match v {
        toml::Value::Table(t) => Ok(t
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))),
        toml::Value::Array(a) => {
            let i: usize = seg
                .parse()
                .map_err(|_| format!("`{seg}` is not an array index"))?;
            let len = a.len();
            a.get_mut(i)
                .ok_or_else(|| format!("index {i} out of range (length {len})"))
        }
        _ => Err(format!("cannot descend into a scalar at `{seg}`")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
version = 1
seed = 7
duration = 20.0
grid_policies = ["audit-log", "encrypted-storage"]
trusted_issuers = ["grid-ca"]

[[domains]]
id = "d1"
nodes = [1, 2, 3]
dtm_id = 3
policies = ["audit-log"]
credential = { issuer = "grid-ca", token = "t1" }
security = { sa = [0.5, 0.5, 0.5, 0.5, 0.5, 0.5] }
"#;

    #[test]
    fn minimal_scenario_is_valid() {
        let s = Scenario::from_toml(MINIMAL, &[]).unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.trust, TrustConfig::default());
        assert!(s.workload.clients.is_empty());
    }

    #[test]
    fn weights_not_summing_to_one_are_reported() {
        let text = format!("{MINIMAL}\n[trust]\nalpha = 0.3\nbeta = 0.3\ndelta_w = 0.3\n");
        match Scenario::from_toml(&text, &[]) {
            Err(ScenarioError::Invalid(v)) => {
                assert!(
                    v.iter()
                        .any(|m| m.contains("alpha + trust.beta + trust.delta_w must equal 1")),
                    "{v:?}"
                )
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_dtm_is_reported_by_field() {
        let text = MINIMAL.replace("dtm_id = 3\n", "");
        match Scenario::from_toml(&text, &[]) {
            Err(ScenarioError::Invalid(v)) => {
                assert_eq!(v, vec!["domains[0].dtm_id: missing".to_string()])
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn every_violation_is_listed() {
        let text = MINIMAL
            .replace("duration = 20.0", "duration = -1.0")
            .replace("nodes = [1, 2, 3]", "nodes = []");
        let Err(ScenarioError::Invalid(v)) = Scenario::from_toml(&text, &[]) else {
            panic!("expected violations");
        };
        assert!(v.iter().any(|m| m.starts_with("duration")));
        assert!(v.iter().any(|m| m.starts_with("domains[0].nodes")));
        assert!(v.iter().any(|m| m.starts_with("domains[0].dtm_id")));
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = Scenario::from_toml("version = 1\nduration = \n", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err =
            Scenario::from_toml(&format!("{MINIMAL}\n[trust]\ngamma = 1.0\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("gamma"));
    }

    #[test]
    fn overrides_reach_nested_and_indexed_keys() {
        let overrides = vec![
            ("trust.alpha".to_string(), "0.5".to_string()),
            ("trust.beta".to_string(), "0.25".to_string()),
            ("trust.delta_w".to_string(), "0.25".to_string()),
            ("domains.0.dtm_id".to_string(), "2".to_string()),
            ("seed".to_string(), "99".to_string()),
        ];
        let s = Scenario::from_toml(MINIMAL, &overrides).unwrap();
        assert_eq!(s.trust.alpha, 0.5);
        assert_eq!(s.domains[0].dtm_id, Some(2));
        assert_eq!(s.seed, 99);
        let bad = vec![("domains.5.id".to_string(), "x".to_string())];
        assert!(matches!(
            Scenario::from_toml(MINIMAL, &bad),
            Err(ScenarioError::Override { .. })
        ));
    }

    #[test]
    fn round_trips_through_toml() {
        let s = Scenario::from_toml(MINIMAL, &[]).unwrap();
        assert_eq!(Scenario::from_toml(&s.to_toml(), &[]).unwrap(), s);
    }

    #[test]
    fn raw_security_criteria_are_normalised() {
        let text = MINIMAL.replace(
            "security = { sa = [0.5, 0.5, 0.5, 0.5, 0.5, 0.5] }",
            "security = { raw = { audit_data_size = 512.0, signature_file_size = 50.0, signature_update_frequency = 12.0, memory_scan_frequency = 24.0, firewall_rules = 50.0, tls = true, ipsec = false, sandbox = true, key_management = false } }",
        );
        let s = Scenario::from_toml(&text, &[]).unwrap();
        let sa = s.domains[0].security.resolve(&s.security.scales).unwrap();
        assert_eq!(sa.values()[3], 0.5);
        assert!((sa.values()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn drift_changes_quality_at_step() {
        let b = BehaviorProfile {
            quality: [0.9; 6],
            drift: vec![DriftStep {
                at: 10.0,
                quality: [0.1; 6],
            }],
        };
        assert_eq!(b.quality_at(9.9), [0.9; 6]);
        assert_eq!(b.quality_at(10.0), [0.1; 6]);
    }
}
