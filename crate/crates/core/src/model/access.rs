use std::fmt;

use serde::{Deserialize, Serialize};

use super::{DomainId, NodeId};

/// Who is touching a repository.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "role")]
pub enum Principal {
    /// The DTM components of a domain.
    Dtm {
        domain: DomainId,
    },
    /// An ordinary resource node.
    Node {
        node: NodeId,
        domain: DomainId,
    },
    /// The global resource manager.
    Grm,
    Unknown,
}

impl fmt::Display for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Principal::Dtm { domain } => write!(f, "dtm@{domain}"),
            Principal::Node { node, domain } => write!(f, "node{node}@{domain}"),
            Principal::Grm => f.write_str("grm"),
            Principal::Unknown => f.write_str("unknown"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepoKind {
    Trust,
    Feedback,
    DomainProperty,
    Certificate,
}

impl RepoKind {
    pub fn label(self) -> &'static str {
        match self {
            RepoKind::Trust => "trust",
            RepoKind::Feedback => "feedback",
            RepoKind::DomainProperty => "domain_property",
            RepoKind::Certificate => "certificate",
        }
    }
}

/// A concrete repository: its kind and, for per-domain repositories, the
/// owning domain. The domain-property repository is grid-wide.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RepoScope {
    pub kind: RepoKind,
    pub owner: Option<DomainId>,
}

impl RepoScope {
    pub fn global(kind: RepoKind) -> Self {
        Self { kind, owner: None }
    }

    pub fn domain(kind: RepoKind, owner: DomainId) -> Self {
        Self {
            kind,
            owner: Some(owner),
        }
    }

    /// Journal label: `trust/d1`, `domain_property`, ...
    pub fn label(&self) -> String {
        match &self.owner {
            Some(d) => format!("{}/{}", self.kind.label(), d),
            None => self.kind.label().to_string(),
        }
    }

    pub fn parse_label(label: &str) -> Option<Self> {
        let (kind, owner) = match label.split_once('/') {
            Some((k, d)) => (k, Some(DomainId::new(d))),
            None => (label, None),
        };
        let kind = match kind {
            "trust" => RepoKind::Trust,
            "feedback" => RepoKind::Feedback,
            "domain_property" => RepoKind::DomainProperty,
            "certificate" => RepoKind::Certificate,
            _ => return None,
        };
        Some(Self { kind, owner })
    }
}

impl fmt::Display for RepoScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepoAction {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny,
}

/// Static capability table:
///
/// | principal        | repository                                  | actions     |
/// |------------------|---------------------------------------------|-------------|
/// | DTM of domain d  | trust, feedback, certificate owned by d     | read, write |
/// | node of domain d | trust owned by d                            | read        |
/// | GRM              | domain property                             | read, write |
///
/// Everything else, including unknown principals, is denied.
pub fn access_control(principal: &Principal, repo: &RepoScope, action: RepoAction) -> Decision {
    let allowed = match (principal, repo.kind) {
        (
            Principal::Dtm { domain },
            RepoKind::Trust | RepoKind::Feedback | RepoKind::Certificate,
        ) => repo.owner.as_ref() == Some(domain),
        (Principal::Node { domain, .. }, RepoKind::Trust) => {
            action == RepoAction::Read && repo.owner.as_ref() == Some(domain)
        }
        (Principal::Grm, RepoKind::DomainProperty) => repo.owner.is_none(),
        _ => false,
    };
    if allowed {
        Decision::Allow
    } else {
        Decision::Deny
    }
}
