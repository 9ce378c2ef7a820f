use std::collections::BTreeMap;
use std::fmt::Display;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use super::access::{access_control, Decision, Principal, RepoAction, RepoKind, RepoScope};
use super::journal::{Journal, JournalError};
use super::{Certificate, DomainId, DomainProfile, Feedback, NodeId, SimTime, TrustRecord, TxId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RepoError {
    #[error("{principal} may not {action:?} {repo}")]
    AccessDenied {
        principal: String,
        repo: String,
        action: RepoAction,
    },
    #[error("{repo}: no entry for key {key}")]
    NotFound { repo: String, key: String },
}

/// A keyed store guarded by [`access_control`]. Every successful write is
/// appended to the caller-supplied journal.
#[derive(Clone, Debug, PartialEq)]
pub struct Repository<K, V> {
    scope: RepoScope,
    entries: BTreeMap<K, V>,
}

impl<K, V> Repository<K, V>
where
    K: Ord + Clone + Display,
    V: Clone + Serialize,
{
    pub fn new(scope: RepoScope) -> Self {
        Self {
            scope,
            entries: BTreeMap::new(),
        }
    }

    pub fn scope(&self) -> &RepoScope {
        &self.scope
    }

    fn guard(&self, principal: &Principal, action: RepoAction) -> Result<(), RepoError> {
        match access_control(principal, &self.scope, action) {
            Decision::Allow => Ok(()),
            Decision::Deny => Err(RepoError::AccessDenied {
                principal: principal.to_string(),
                repo: self.scope.label(),
                action,
            }),
        }
    }

    pub fn get(&self, principal: &Principal, key: &K) -> Result<&V, RepoError> {
        self.guard(principal, RepoAction::Read)?;
        self.entries.get(key).ok_or_else(|| RepoError::NotFound {
            repo: self.scope.label(),
            key: key.to_string(),
        })
    }

    pub fn contains(&self, principal: &Principal, key: &K) -> Result<bool, RepoError> {
        self.guard(principal, RepoAction::Read)?;
        Ok(self.entries.contains_key(key))
    }

    pub fn put(
        &mut self,
        principal: &Principal,
        key: K,
        value: V,
        now: SimTime,
        journal: &mut Journal,
    ) -> Result<(), RepoError> {
        self.guard(principal, RepoAction::Write)?;
        journal.record_put(now, self.scope.label(), key.to_string(), &value);
        self.entries.insert(key, value);
        Ok(())
    }

    /// Unguarded view used for snapshots, reports and invariant sweeps.
    pub fn snapshot(&self) -> &BTreeMap<K, V> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn restore(&mut self, key: K, value: V) {
        self.entries.insert(key, value);
    }
}

/// Per-domain repositories.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainRepos {
    pub trust: Repository<NodeId, TrustRecord>,
    pub feedback: Repository<TxId, Feedback>,
    pub certificates: Repository<NodeId, Certificate>,
}

impl DomainRepos {
    pub fn new(domain: &DomainId) -> Self {
        Self {
            trust: Repository::new(RepoScope::domain(RepoKind::Trust, domain.clone())),
            feedback: Repository::new(RepoScope::domain(RepoKind::Feedback, domain.clone())),
            certificates: Repository::new(RepoScope::domain(RepoKind::Certificate, domain.clone())),
        }
    }
}

/// All repositories of the grid plus the shared journal.
#[derive(Clone, Debug, PartialEq)]
pub struct Store {
    pub registry: Repository<DomainId, DomainProfile>,
    pub domains: BTreeMap<DomainId, DomainRepos>,
    pub journal: Journal,
}

impl Default for Store {
    fn default() -> Self {
        Self::new()
    }
}

impl Store {
    pub fn new() -> Self {
        Self {
            registry: Repository::new(RepoScope::global(RepoKind::DomainProperty)),
            domains: BTreeMap::new(),
            journal: Journal::new(),
        }
    }

    pub fn domain(&self, id: &DomainId) -> Option<&DomainRepos> {
        self.domains.get(id)
    }

    pub fn domain_mut(&mut self, id: &DomainId) -> Option<&mut DomainRepos> {
        self.domains.get_mut(id)
    }

    /// Finds the trust record of `node` in whichever domain holds it.
    pub fn trust_record(&self, node: NodeId) -> Option<&TrustRecord> {
        self.domains
            .values()
            .find_map(|d| d.trust.snapshot().get(&node))
    }

    pub fn all_trust_records(&self) -> impl Iterator<Item = &TrustRecord> {
        self.domains
            .values()
            .flat_map(|d| d.trust.snapshot().values())
    }

    /// Rebuilds repository contents from journal text. Values are restored
    /// at the journal's 12-significant-digit precision; the rebuilt store
    /// starts with an empty journal.
    pub fn replay(text: &str) -> Result<Self, JournalError> {
        let mut store = Store::new();
        for (i, entry) in Journal::parse(text)?.into_iter().enumerate() {
            let line = i + 1;
            let bad = |reason: String| JournalError::Malformed { line, reason };
            let scope = RepoScope::parse_label(&entry.repo)
                .ok_or_else(|| bad(format!("unknown repository `{}`", entry.repo)))?;
            match (scope.kind, scope.owner) {
                (RepoKind::DomainProperty, None) => {
                    let v: DomainProfile = decode(&entry.value, line)?;
                    store.registry.restore(DomainId::new(entry.key), v);
                }
                (kind, Some(owner)) => {
                    let repos = store
                        .domains
                        .entry(owner.clone())
                        .or_insert_with(|| DomainRepos::new(&owner));
                    match kind {
                        RepoKind::Trust => {
                            let key = parse_key(&entry.key, line)?;
                            repos
                                .trust
                                .restore(NodeId(key), decode(&entry.value, line)?);
                        }
                        RepoKind::Feedback => {
                            let key = parse_key(&entry.key, line)?;
                            repos
                                .feedback
                                .restore(TxId(key), decode(&entry.value, line)?);
                        }
                        RepoKind::Certificate => {
                            let key = parse_key(&entry.key, line)?;
                            repos
                                .certificates
                                .restore(NodeId(key), decode(&entry.value, line)?);
                        }
                        RepoKind::DomainProperty => {
                            return Err(bad("domain_property is not per-domain".into()))
                        }
                    }
                }
                (kind, None) => return Err(bad(format!("{} needs an owner", kind.label()))),
            }
        }
        Ok(store)
    }
}

fn decode<T: DeserializeOwned>(text: &str, line: usize) -> Result<T, JournalError> {
    serde_json::from_str(text).map_err(|source| JournalError::Value { line, source })
}

fn parse_key<T: std::str::FromStr>(key: &str, line: usize) -> Result<T, JournalError> {
    key.parse().map_err(|_| JournalError::Malformed {
        line,
        reason: format!("bad numeric key `{key}`"),
    })
}
