//! Core domain types shared by every component of the platform, plus the
//! four access-controlled repositories (trust, feedback, domain property,
//! certificate) and the mutation journal.

mod access;
mod journal;
mod repo;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use access::{access_control, Decision, Principal, RepoAction, RepoKind, RepoScope};
pub use journal::{canonical_text, format_float, Journal, JournalEntry, JournalError};
pub use repo::{DomainRepos, RepoError, Repository, Store};

/// Number of QoS parameters: delay, response time, accuracy, cost,
/// availability, jitter.
pub const PARAM_COUNT: usize = 6;

/// Number of security attributes scored per domain.
pub const SECURITY_ATTRIBUTE_COUNT: usize = 6;

/// Trust assigned to every resource node when its domain registers.
pub const NEUTRAL_TRUST: f64 = 0.5;

/// One value per QoS parameter, each in `[0, 1]`.
pub type QosVector = [f64; PARAM_COUNT];

/// Simulation clock reading.
pub type SimTime = f64;

pub const QOS_PARAMETER_NAMES: [&str; PARAM_COUNT] = [
    "delay",
    "response_time",
    "accuracy",
    "cost",
    "availability",
    "jitter",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("duplicate policy id `{0}`")]
    DuplicatePolicy(String),
    #[error("security attribute {index} = {value} is outside [0, 1]")]
    AttributeOutOfRange { index: usize, value: f64 },
    #[error("domain `{0}` has no member nodes")]
    EmptyDomain(DomainId),
    #[error("dtm {dtm} is not a member of domain `{domain}`")]
    DtmNotMember { domain: DomainId, dtm: NodeId },
    #[error("domain `{domain}` lists node {node} more than once")]
    DuplicateNode { domain: DomainId, node: NodeId },
    #[error("domain id `{0}` must be non-empty and contain no whitespace")]
    BadDomainId(String),
    #[error("{field} = {value} is outside [0, 1]")]
    OutOfUnitRange { field: &'static str, value: f64 },
}

/// Grid-wide resource node identifier. Ring elections pick the largest id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(pub String);

impl DomainId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Ids appear as whitespace-separated journal fields.
    pub fn is_well_formed(&self) -> bool {
        !self.0.is_empty() && !self.0.chars().any(char::is_whitespace)
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TxId(pub u64);

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A named capability requirement agreed in the grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub id: String,
    pub predicate: String,
}

impl Policy {
    pub fn new(id: impl Into<String>, predicate: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            predicate: predicate.into(),
        }
    }
}

/// Ordered set of policies with unique ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Policy>", into = "Vec<Policy>")]
pub struct PolicySet {
    policies: Vec<Policy>,
}

impl PolicySet {
    pub fn new(policies: Vec<Policy>) -> Result<Self, ModelError> {
        let mut seen = BTreeSet::new();
        for p in &policies {
            if !seen.insert(p.id.as_str()) {
                return Err(ModelError::DuplicatePolicy(p.id.clone()));
            }
        }
        Ok(Self { policies })
    }

    /// Builds a set whose ids are `c1..ck`, one per predicate tag.
    pub fn from_predicates<I, S>(predicates: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let policies = predicates
            .into_iter()
            .enumerate()
            .map(|(i, p)| Policy::new(format!("c{}", i + 1), p))
            .collect();
        Self { policies }
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Policy> {
        self.policies.iter()
    }

    pub fn contains_predicate(&self, predicate: &str) -> bool {
        self.policies.iter().any(|p| p.predicate == predicate)
    }

    /// Returns a copy with `policy` appended, or `None` if its id is taken.
    pub fn with(&self, policy: Policy) -> Option<Self> {
        if self.policies.iter().any(|p| p.id == policy.id) {
            return None;
        }
        let mut policies = self.policies.clone();
        policies.push(policy);
        Some(Self { policies })
    }
}

impl TryFrom<Vec<Policy>> for PolicySet {
    type Error = ModelError;

    fn try_from(policies: Vec<Policy>) -> Result<Self, Self::Error> {
        Self::new(policies)
    }
}

impl From<PolicySet> for Vec<Policy> {
    fn from(set: PolicySet) -> Self {
        set.policies
    }
}

/// Raw evaluation criteria behind the six security attributes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCriteria {
    /// Intrusion detection: traffic audit data size.
    pub audit_data_size: f64,
    /// Intrusion detection: signature file size.
    pub signature_file_size: f64,
    /// Intrusion detection: signature updates per time unit.
    pub signature_update_frequency: f64,
    /// Antivirus: memory scans per time unit.
    pub memory_scan_frequency: f64,
    /// Firewall: number of rules.
    pub firewall_rules: f64,
    pub tls: bool,
    pub ipsec: bool,
    /// Isolated JVM or equivalent execution sandbox.
    pub sandbox: bool,
    /// Cryptographic key management functions available.
    pub key_management: bool,
}

/// The six normalised security attributes of a domain, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecurityAttributes {
    sa: [f64; SECURITY_ATTRIBUTE_COUNT],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw: Option<RawCriteria>,
}

impl SecurityAttributes {
    pub fn new(sa: [f64; SECURITY_ATTRIBUTE_COUNT]) -> Result<Self, ModelError> {
        Self::with_raw(sa, None)
    }

    pub fn with_raw(
        sa: [f64; SECURITY_ATTRIBUTE_COUNT],
        raw: Option<RawCriteria>,
    ) -> Result<Self, ModelError> {
        for (index, &value) in sa.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(ModelError::AttributeOutOfRange { index, value });
            }
        }
        Ok(Self { sa, raw })
    }

    pub fn values(&self) -> &[f64; SECURITY_ATTRIBUTE_COUNT] {
        &self.sa
    }

    pub fn raw(&self) -> Option<&RawCriteria> {
        self.raw.as_ref()
    }
}

/// Opaque credential presented by a joining domain. No cryptography: the
/// check is issuer membership plus the `valid` flag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub issuer: String,
    pub token: String,
    pub valid: bool,
}

impl Credential {
    pub fn new(issuer: impl Into<String>, token: impl Into<String>) -> Self {
        Self {
            issuer: issuer.into(),
            token: token.into(),
            valid: true,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        !self.issuer.trim().is_empty() && !self.token.trim().is_empty()
    }
}

/// Everything the grid records about a domain when it registers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainProfile {
    pub domain_id: DomainId,
    pub policies: PolicySet,
    pub security: SecurityAttributes,
    pub node_ids: Vec<NodeId>,
    /// Contact DTM at registration; also the initiator of the first ring
    /// election inside the domain.
    pub dtm_id: NodeId,
    pub credential: Credential,
}

impl DomainProfile {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.domain_id.is_well_formed() {
            return Err(ModelError::BadDomainId(self.domain_id.0.clone()));
        }
        if self.node_ids.is_empty() {
            return Err(ModelError::EmptyDomain(self.domain_id.clone()));
        }
        let mut seen = BTreeSet::new();
        for &node in &self.node_ids {
            if !seen.insert(node) {
                return Err(ModelError::DuplicateNode {
                    domain: self.domain_id.clone(),
                    node,
                });
            }
        }
        if !seen.contains(&self.dtm_id) {
            return Err(ModelError::DtmNotMember {
                domain: self.domain_id.clone(),
                dtm: self.dtm_id,
            });
        }
        Ok(())
    }
}

/// Per-node trust state: current trust, transaction count, per-parameter
/// quality estimates and the time of the last update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrustRecord {
    pub node_id: NodeId,
    pub trust: f64,
    pub n: u64,
    pub params: QosVector,
    pub updated_at: SimTime,
}

impl TrustRecord {
    /// Fresh record for a newly registered node.
    pub fn neutral(node_id: NodeId, now: SimTime) -> Self {
        Self {
            node_id,
            trust: NEUTRAL_TRUST,
            n: 0,
            params: [NEUTRAL_TRUST; PARAM_COUNT],
            updated_at: now,
        }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        unit("trust", self.trust)?;
        for &p in &self.params {
            unit("params", p)?;
        }
        Ok(())
    }
}

pub(crate) fn unit(field: &'static str, value: f64) -> Result<(), ModelError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ModelError::OutOfUnitRange { field, value })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestClass {
    ServiceRequest,
    Feedback,
    Security,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    InterDomain,
    IntraDomain,
}

/// Demand expressed by a user: percentages per QoS parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandRequest {
    pub request_id: u64,
    pub client_id: String,
    pub dp: QosVector,
    pub service_type: String,
}

/// Parameter list carried by a request; its variant must match the class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Payload {
    Demand(DemandRequest),
    Feedback(Feedback),
    Security { attributes: SecurityAttributes },
}

/// The `(C, D, PL, Q, T)` request received by a DTM, plus the node that
/// forwarded it (authenticated against the certificate repository).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub origin: NodeId,
    pub class: RequestClass,
    pub scope: Scope,
    pub payload: Payload,
    /// Target DTM (service and security requests) or resource node (feedback).
    pub target: NodeId,
    pub service_type: String,
}

impl Request {
    pub fn is_consistent(&self) -> bool {
        matches!(
            (self.class, &self.payload),
            (RequestClass::ServiceRequest, Payload::Demand(_))
                | (RequestClass::Feedback, Payload::Feedback(_))
                | (RequestClass::Security, Payload::Security { .. })
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum FeedbackVerdict {
    Pending,
    Verified,
    /// At least one rating was replaced; `original` keeps what the client sent.
    Rectified {
        original: QosVector,
    },
}

/// A client's post-transaction ratings of a provider.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub tx_id: TxId,
    pub provider: NodeId,
    pub client_id: String,
    pub ratings: QosVector,
    pub issued_at: SimTime,
    pub verdict: FeedbackVerdict,
}

impl Feedback {
    pub fn pending(
        tx_id: TxId,
        provider: NodeId,
        client_id: impl Into<String>,
        ratings: QosVector,
        issued_at: SimTime,
    ) -> Self {
        Self {
            tx_id,
            provider,
            client_id: client_id.into(),
            ratings,
            issued_at,
            verdict: FeedbackVerdict::Pending,
        }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        for &r in &self.ratings {
            unit("ratings", r)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    pub subject_id: NodeId,
    pub issuer_id: String,
    pub credential: String,
    pub valid: bool,
}
