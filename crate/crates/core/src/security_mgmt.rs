//! Security management: request authentication against a domain's
//! certificate repository, the DTM certificate registry, and the
//! self-defense capability score of a domain.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Certificate, Journal, NodeId, Principal, RawCriteria, RepoError, Repository, Request,
    SecurityAttributes, SimTime, SECURITY_ATTRIBUTE_COUNT,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SecurityError {
    #[error("certificate subject {0} is not a known DTM")]
    UnknownSubject(NodeId),
    #[error("criterion `{name}` is negative ({value})")]
    InvalidCriteria { name: &'static str, value: f64 },
    #[error("security weights must be non-negative with a positive sum")]
    InvalidWeights,
    #[error("reference scale `{0}` must be positive")]
    InvalidScale(&'static str),
    #[error(transparent)]
    Repo(#[from] RepoError),
}

/// Relative importance of each security attribute; normalised to sum to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SecurityWeights {
    w: [f64; SECURITY_ATTRIBUTE_COUNT],
}

impl SecurityWeights {
    /// Normalises `raw` so the weights sum to one.
    pub fn new(raw: [f64; SECURITY_ATTRIBUTE_COUNT]) -> Result<Self, SecurityError> {
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SecurityError::InvalidWeights);
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(SecurityError::InvalidWeights);
        }
        Ok(Self {
            w: raw.map(|w| w / total),
        })
    }

    pub fn uniform() -> Self {
        Self {
            w: [1.0 / SECURITY_ATTRIBUTE_COUNT as f64; SECURITY_ATTRIBUTE_COUNT],
        }
    }

    pub fn values(&self) -> &[f64; SECURITY_ATTRIBUTE_COUNT] {
        &self.w
    }
}

impl Default for SecurityWeights {
    fn default() -> Self {
        Self::uniform()
    }
}

impl TryFrom<Vec<f64>> for SecurityWeights {
    type Error = String;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        let arr: [f64; SECURITY_ATTRIBUTE_COUNT] = v
            .try_into()
            .map_err(|v: Vec<f64>| format!("expected 6 security weights, got {}", v.len()))?;
        Self::new(arr).map_err(|e| e.to_string())
    }
}

impl From<SecurityWeights> for Vec<f64> {
    fn from(w: SecurityWeights) -> Self {
        w.w.to_vec()
    }
}

/// Self-defense capability of a domain, in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DefenseScore(pub f64);

impl DefenseScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Saturation points for the count/size/frequency criteria. A raw value at
/// or above its reference scores 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceScales {
    pub audit_data_size: f64,
    pub signature_file_size: f64,
    pub signature_update_frequency: f64,
    pub memory_scan_frequency: f64,
    pub firewall_rules: f64,
}

impl Default for ReferenceScales {
    fn default() -> Self {
        Self {
            audit_data_size: 1024.0,
            signature_file_size: 100.0,
            signature_update_frequency: 24.0,
            memory_scan_frequency: 24.0,
            firewall_rules: 50.0,
        }
    }
}

impl ReferenceScales {
    pub fn validate(&self) -> Result<(), SecurityError> {
        for (name, v) in [
            ("audit_data_size", self.audit_data_size),
            ("signature_file_size", self.signature_file_size),
            (
                "signature_update_frequency",
                self.signature_update_frequency,
            ),
            ("memory_scan_frequency", self.memory_scan_frequency),
            ("firewall_rules", self.firewall_rules),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SecurityError::InvalidScale(name));
            }
        }
        Ok(())
    }
}

fn saturate(name: &'static str, raw: f64, reference: f64) -> Result<f64, SecurityError> {
    if raw < 0.0 || raw.is_nan() {
        return Err(SecurityError::InvalidCriteria { name, value: raw });
    }
    Ok((raw / reference).min(1.0))
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Maps the raw evaluation criteria onto six attributes in `[0, 1]`:
/// intrusion detection (mean of three saturated criteria), antivirus,
/// firewall, secure network (none/one/both of TLS and IPsec → 0/0.5/1),
/// execution sandbox and key management.
pub fn normalize_attributes(
    raw: &RawCriteria,
    scales: &ReferenceScales,
) -> Result<SecurityAttributes, SecurityError> {
    scales.validate()?;
    let ids = (saturate(
        "audit_data_size",
        raw.audit_data_size,
        scales.audit_data_size,
    )? + saturate(
        "signature_file_size",
        raw.signature_file_size,
        scales.signature_file_size,
    )? + saturate(
        "signature_update_frequency",
        raw.signature_update_frequency,
        scales.signature_update_frequency,
    )?) / 3.0;
    let antivirus = saturate(
        "memory_scan_frequency",
        raw.memory_scan_frequency,
        scales.memory_scan_frequency,
    )?;
    let firewall = saturate("firewall_rules", raw.firewall_rules, scales.firewall_rules)?;
    let network = (flag(raw.tls) + flag(raw.ipsec)) / 2.0;
    let sa = [
        ids,
        antivirus,
        firewall,
        network,
        flag(raw.sandbox),
        flag(raw.key_management),
    ];
    Ok(SecurityAttributes::with_raw(sa, Some(raw.clone()))
        .expect("saturated attributes lie in [0, 1]"))
}

/// Weighted sum of the security attributes.
pub fn self_defense(sa: &SecurityAttributes, w: &SecurityWeights) -> DefenseScore {
    let df: f64 = sa.values().iter().zip(w.values()).map(|(s, w)| w * s).sum();
    DefenseScore(df.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AuthDecision {
    Authorized,
    Denied(DenyReason),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    NoCertificate,
    Revoked,
    MalformedRequest,
}

/// Admits a request iff its origin holds a valid certificate in this
/// domain's certificate repository.
pub fn authenticate_request(
    req: &Request,
    certs: &Repository<NodeId, Certificate>,
    reader: &Principal,
) -> AuthDecision {
    if !req.is_consistent() {
        return AuthDecision::Denied(DenyReason::MalformedRequest);
    }
    match certs.get(reader, &req.origin) {
        Ok(cert) if cert.valid => AuthDecision::Authorized,
        Ok(_) => AuthDecision::Denied(DenyReason::Revoked),
        Err(_) => AuthDecision::Denied(DenyReason::NoCertificate),
    }
}

/// Stores (or overwrites) a DTM certificate in a domain's certificate
/// repository.
pub fn register_dtm_certificate(
    certs: &mut Repository<NodeId, Certificate>,
    writer: &Principal,
    cert: Certificate,
    known_dtms: &BTreeSet<NodeId>,
    now: SimTime,
    journal: &mut Journal,
) -> Result<(), SecurityError> {
    if !known_dtms.contains(&cert.subject_id) {
        return Err(SecurityError::UnknownSubject(cert.subject_id));
    }
    certs.put(writer, cert.subject_id, cert, now, journal)?;
    Ok(())
}
