//! GRM-side components: trust negotiation (authentication and policy
//! mapping), registration and initialisation, and propagation of a new
//! domain's properties to every DTM.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Credential, DomainId, DomainProfile, DomainRepos, ModelError, NodeId, PolicySet, Principal,
    RepoError, SimTime, Store, TrustRecord,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UpperError {
    #[error("domain `{0}` is already registered")]
    DuplicateDomain(DomainId),
    #[error("invalid profile: {0}")]
    InvalidProfile(#[from] ModelError),
    #[error("node {node} already belongs to domain `{domain}`")]
    NodeTaken { node: NodeId, domain: DomainId },
    #[error(transparent)]
    Repo(#[from] RepoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthOutcome {
    Accepted,
    Rejected,
}

/// Simulated credential check: the issuer must be trusted and the token
/// marked valid. Malformed tokens are rejected.
pub fn authenticate_domain(
    credential: &Credential,
    trusted_issuers: &BTreeSet<String>,
) -> AuthOutcome {
    if credential.is_well_formed()
        && credential.valid
        && trusted_issuers.contains(&credential.issuer)
    {
        AuthOutcome::Accepted
    } else {
        AuthOutcome::Rejected
    }
}

/// Outcome of matching a joining domain's policies against the grid's.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinVerdict {
    pub authorized: bool,
    /// Ids of the grid policies the new domain satisfies.
    pub satisfied: Vec<String>,
    /// Number of grid policies.
    pub required: usize,
    /// Number satisfied; always `satisfied.len()`.
    pub l: usize,
}

/// Minimum number of grid policies a domain must satisfy out of `k`: at
/// least half, rounded up. Zero when the grid has no policies.
pub fn minimum_satisfied(k: usize) -> usize {
    k.div_ceil(2)
}

/// A grid policy is satisfied when the new domain declares a policy with
/// the same predicate tag.
pub fn policy_mapping(new_domain: &PolicySet, grid: &PolicySet) -> JoinVerdict {
    let satisfied: Vec<String> = grid
        .iter()
        .filter(|c| new_domain.contains_predicate(&c.predicate))
        .map(|c| c.id.clone())
        .collect();
    let l = satisfied.len();
    let required = grid.len();
    JoinVerdict {
        authorized: l >= minimum_satisfied(required),
        satisfied,
        required,
        l,
    }
}

/// Stores the profile in the domain-property repository and gives every
/// member node a neutral trust record.
pub fn register_domain(
    store: &mut Store,
    profile: &DomainProfile,
    now: SimTime,
) -> Result<(), UpperError> {
    profile.validate()?;
    let id = &profile.domain_id;
    if store.registry.contains(&Principal::Grm, id)? || store.domains.contains_key(id) {
        return Err(UpperError::DuplicateDomain(id.clone()));
    }
    for (domain, repos) in &store.domains {
        if let Some(&node) = profile
            .node_ids
            .iter()
            .find(|n| repos.trust.snapshot().contains_key(n))
        {
            return Err(UpperError::NodeTaken {
                node,
                domain: domain.clone(),
            });
        }
    }

    store.registry.put(
        &Principal::Grm,
        id.clone(),
        profile.clone(),
        now,
        &mut store.journal,
    )?;
    let mut repos = DomainRepos::new(id);
    let dtm = Principal::Dtm { domain: id.clone() };
    for &node in &profile.node_ids {
        repos.trust.put(
            &dtm,
            node,
            TrustRecord::neutral(node, now),
            now,
            &mut store.journal,
        )?;
    }
    store.domains.insert(id.clone(), repos);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryStatus {
    Delivered,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub recipient: NodeId,
    pub domain: DomainId,
    pub status: DeliveryStatus,
}

/// A DTM (or DTM backup) that should receive propagated profiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Recipient {
    pub node: NodeId,
    pub live: bool,
}

/// Broadcasts `profile` to `members`; each distinct recipient appears in
/// the receipts exactly once, in first-seen order.
pub fn propagate(profile: &DomainProfile, members: &[Recipient]) -> Vec<Receipt> {
    let mut seen = BTreeSet::new();
    members
        .iter()
        .filter(|m| seen.insert(m.node))
        .map(|m| Receipt {
            recipient: m.node,
            domain: profile.domain_id.clone(),
            status: if m.live {
                DeliveryStatus::Delivered
            } else {
                DeliveryStatus::Failed
            },
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoinRequest {
    pub profile: DomainProfile,
}

/// Grid-side inputs to the join flow.
#[derive(Clone, Debug, Default)]
pub struct JoinContext {
    pub grid_policies: PolicySet,
    pub trusted_issuers: BTreeSet<String>,
    pub recipients: Vec<Recipient>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "stage")]
pub enum Refusal {
    Authentication,
    Policy { verdict: JoinVerdict },
    Registration { reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub enum JoinOutcome {
    Joined {
        verdict: JoinVerdict,
        receipts: Vec<Receipt>,
    },
    Refused(Refusal),
}

/// Runs the join sequence: authenticate, map policies, register (only if
/// authorised), propagate. A refusal at any stage writes nothing.
pub fn add_domain(
    store: &mut Store,
    request: &JoinRequest,
    ctx: &JoinContext,
    now: SimTime,
) -> JoinOutcome {
    let profile = &request.profile;
    if authenticate_domain(&profile.credential, &ctx.trusted_issuers) == AuthOutcome::Rejected {
        return JoinOutcome::Refused(Refusal::Authentication);
    }
    let verdict = policy_mapping(&profile.policies, &ctx.grid_policies);
    if !verdict.authorized {
        return JoinOutcome::Refused(Refusal::Policy { verdict });
    }
    if let Err(e) = register_domain(store, profile, now) {
        return JoinOutcome::Refused(Refusal::Registration {
            reason: e.to_string(),
        });
    }
    let receipts = propagate(profile, &ctx.recipients);
    JoinOutcome::Joined { verdict, receipts }
}
