//! Control plane: ring election of domain and grid managers, backup
//! promotion when a manager stops answering heartbeats, and the decision
//! tree a domain manager applies to incoming requests.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Certificate, DomainId, NodeId, Principal, Repository, Request, RequestClass, Scope,
};
use crate::security_mgmt::{authenticate_request, AuthDecision, DenyReason};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClusterError {
    #[error("no live member to elect")]
    EmptyRing,
    #[error("unknown domain {0}")]
    UnknownDomain(DomainId),
    #[error("node {0} is already a member of domain {1}")]
    DuplicateMember(NodeId, DomainId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub heartbeat_period: f64,
    pub heartbeat_timeout: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            heartbeat_period: 1.0,
            heartbeat_timeout: 3.0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.heartbeat_period > 0.0) {
            out.push("cluster.heartbeat_period must be positive".to_string());
        }
        if !(self.heartbeat_timeout >= self.heartbeat_period) {
            out.push("cluster.heartbeat_timeout must be at least heartbeat_period".to_string());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Node,
    Dtm,
    DtmBackup,
    Grm,
    GrmBackup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Liveness {
    Up,
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Election {
    pub leader: NodeId,
    pub backup: Option<NodeId>,
    pub messages: usize,
}

/// One round of max-id circulation. The first live member in ring order
/// starts a token carrying the two largest ids seen; after one traversal the
/// initiator knows the winner and a second traversal announces it. Down
/// members are bypassed.
pub fn ring_elect(
    ring: &[NodeId],
    is_live: impl Fn(NodeId) -> bool,
) -> Result<Election, ClusterError> {
    let live: Vec<NodeId> = ring.iter().copied().filter(|&n| is_live(n)).collect();
    if live.is_empty() {
        return Err(ClusterError::EmptyRing);
    }
    let mut best: Option<NodeId> = None;
    let mut second: Option<NodeId> = None;
    let mut messages = 0;
    for &hop in &live {
        messages += 1;
        if best.is_none_or(|b| hop > b) {
            second = best;
            best = Some(hop);
        } else if second.is_none_or(|s| hop > s) {
            second = Some(hop);
        }
    }
    // Coordinator announcement.
    messages += live.len();
    Ok(Election {
        leader: best.expect("non-empty ring"),
        backup: second,
        messages,
    })
}

/// Ring and manager slots of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRing {
    pub domain_id: DomainId,
    pub ring: Vec<NodeId>,
    pub dtm: Option<NodeId>,
    pub backup: Option<NodeId>,
    pub offline: bool,
}

/// A change of who holds which slot, as logged to the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "change")]
pub enum MembershipChange {
    Elected {
        scope: String,
        leader: NodeId,
        backup: Option<NodeId>,
        messages: usize,
    },
    Promoted {
        scope: String,
        role: Role,
        from: Option<NodeId>,
        to: NodeId,
    },
    BackupRefilled {
        scope: String,
        role: Role,
        node: Option<NodeId>,
    },
    Offline {
        scope: String,
    },
    Liveness {
        node: NodeId,
        state: Liveness,
    },
}

/// Grid-wide membership as seen by the failure detector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub domains: BTreeMap<DomainId, DomainRing>,
    pub liveness: BTreeMap<NodeId, Liveness>,
    pub grm: Option<NodeId>,
    pub grm_backup: Option<NodeId>,
}

const GRID_SCOPE: &str = "grid";

impl Membership {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_up(&self, node: NodeId) -> bool {
        self.liveness.get(&node) == Some(&Liveness::Up)
    }

    pub fn domain_of(&self, node: NodeId) -> Option<&DomainId> {
        self.domains
            .values()
            .find(|d| d.ring.contains(&node))
            .map(|d| &d.domain_id)
    }

    pub fn dtm_of(&self, domain: &DomainId) -> Option<NodeId> {
        self.domains.get(domain).and_then(|d| d.dtm)
    }

    /// Current DTMs in domain order; the ring over which the GRM is elected.
    pub fn dtms(&self) -> Vec<NodeId> {
        self.domains.values().filter_map(|d| d.dtm).collect()
    }

    pub fn roles_of(&self, node: NodeId) -> BTreeSet<Role> {
        let mut roles = BTreeSet::new();
        for d in self.domains.values() {
            if d.ring.contains(&node) {
                roles.insert(Role::Node);
            }
            if d.dtm == Some(node) {
                roles.insert(Role::Dtm);
            }
            if d.backup == Some(node) {
                roles.insert(Role::DtmBackup);
            }
        }
        if self.grm == Some(node) {
            roles.insert(Role::Grm);
        }
        if self.grm_backup == Some(node) {
            roles.insert(Role::GrmBackup);
        }
        roles
    }

    /// Initial grid: all domains join at once, so the first elections see
    /// every member.
    pub fn bootstrap<'a>(
        domains: impl IntoIterator<Item = (&'a DomainId, &'a [NodeId])>,
    ) -> Result<(Self, Vec<MembershipChange>), ClusterError> {
        let mut m = Self::new();
        for (d, nodes) in domains {
            m.insert_domain(d, nodes)?;
        }
        let changes = m.reconcile();
        Ok((m, changes))
    }

    /// Adds a domain with every member up and elects its managers. Existing
    /// grid managers are kept.
    pub fn add_domain(
        &mut self,
        domain: &DomainId,
        nodes: &[NodeId],
    ) -> Result<Vec<MembershipChange>, ClusterError> {
        self.insert_domain(domain, nodes)?;
        Ok(self.reconcile())
    }

    fn insert_domain(&mut self, domain: &DomainId, nodes: &[NodeId]) -> Result<(), ClusterError> {
        for &n in nodes {
            if let Some(d) = self.domain_of(n) {
                return Err(ClusterError::DuplicateMember(n, d.clone()));
            }
        }
        for &n in nodes {
            self.liveness.insert(n, Liveness::Up);
        }
        self.domains.insert(
            domain.clone(),
            DomainRing {
                domain_id: domain.clone(),
                ring: nodes.to_vec(),
                dtm: None,
                backup: None,
                offline: false,
            },
        );
        Ok(())
    }

    /// Marks a node as failed and repairs every slot it held.
    pub fn failover(&mut self, failed: NodeId) -> Vec<MembershipChange> {
        self.set_liveness(failed, Liveness::Down)
    }

    /// Marks a node as back; it only fills empty slots.
    pub fn recover(&mut self, node: NodeId) -> Vec<MembershipChange> {
        self.set_liveness(node, Liveness::Up)
    }

    fn set_liveness(&mut self, node: NodeId, state: Liveness) -> Vec<MembershipChange> {
        if self.liveness.get(&node) == Some(&state) || !self.liveness.contains_key(&node) {
            return Vec::new();
        }
        self.liveness.insert(node, state);
        let mut changes = vec![MembershipChange::Liveness { node, state }];
        changes.extend(self.reconcile());
        changes
    }

    /// Brings every slot back to a consistent state: live leaders, live
    /// backups distinct from leaders, and a GRM drawn from the DTMs.
    pub fn reconcile(&mut self) -> Vec<MembershipChange> {
        let liveness = self.liveness.clone();
        let up = |n: NodeId| liveness.get(&n) == Some(&Liveness::Up);
        let mut changes = Vec::new();
        for d in self.domains.values_mut() {
            let scope = d.domain_id.to_string();
            repair(
                &d.ring,
                &mut d.dtm,
                &mut d.backup,
                (Role::Dtm, Role::DtmBackup),
                &scope,
                &up,
                &mut changes,
            );
            let offline = d.dtm.is_none();
            if offline && !d.offline {
                changes.push(MembershipChange::Offline { scope });
            }
            d.offline = offline;
        }
        let dtms = self.dtms();
        repair(
            &dtms,
            &mut self.grm,
            &mut self.grm_backup,
            (Role::Grm, Role::GrmBackup),
            GRID_SCOPE,
            &up,
            &mut changes,
        );
        changes
    }

    /// Exactly one live DTM per online domain and one live GRM when any
    /// domain is online.
    pub fn check(&self) -> Result<(), String> {
        for d in self.domains.values() {
            match d.dtm {
                Some(n) if !self.is_up(n) => {
                    return Err(format!("DTM {n} of {} is down", d.domain_id))
                }
                None if !d.offline => return Err(format!("domain {} has no DTM", d.domain_id)),
                _ => {}
            }
            if d.backup.is_some() && d.backup == d.dtm {
                return Err(format!("domain {} backup equals leader", d.domain_id));
            }
        }
        let online = self.domains.values().any(|d| !d.offline);
        match self.grm {
            Some(g) if !self.is_up(g) => Err(format!("GRM {g} is down")),
            Some(g) if !self.dtms().contains(&g) => Err(format!("GRM {g} is not a DTM")),
            None if online => Err("no GRM".to_string()),
            _ => Ok(()),
        }
    }
}

fn repair(
    ring: &[NodeId],
    leader: &mut Option<NodeId>,
    backup: &mut Option<NodeId>,
    roles: (Role, Role),
    scope: &str,
    up: &impl Fn(NodeId) -> bool,
    changes: &mut Vec<MembershipChange>,
) {
    let eligible = |n: NodeId| up(n) && ring.contains(&n);
    if leader.is_some_and(eligible) {
        // Leader healthy; fall through to the backup check.
    } else if let Some(b) = backup.filter(|&b| eligible(b)) {
        changes.push(MembershipChange::Promoted {
            scope: scope.to_string(),
            role: roles.0,
            from: *leader,
            to: b,
        });
        *leader = Some(b);
        *backup = None;
    } else {
        match ring_elect(ring, eligible) {
            Ok(e) => {
                *leader = Some(e.leader);
                *backup = e.backup;
                changes.push(MembershipChange::Elected {
                    scope: scope.to_string(),
                    leader: e.leader,
                    backup: e.backup,
                    messages: e.messages,
                });
                return;
            }
            Err(ClusterError::EmptyRing) => {
                *leader = None;
                *backup = None;
                return;
            }
            Err(_) => unreachable!("ring_elect only fails on an empty ring"),
        }
    }
    let current = *leader;
    if backup.is_some_and(|b| eligible(b) && Some(b) != current) {
        return;
    }
    let refill = ring_elect(ring, |n| eligible(n) && Some(n) != current)
        .ok()
        .map(|e| e.leader);
    if refill != *backup {
        *backup = refill;
        changes.push(MembershipChange::BackupRefilled {
            scope: scope.to_string(),
            role: roles.1,
            node: refill,
        });
    }
}

/// Where a request ends up after the DTM's decision tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "route")]
pub enum Route {
    Demand,
    Feedback,
    Security,
    Terminated { reason: TerminationReason },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Denied(DenyReason),
    /// Security changes are accepted only from inside the domain.
    Unroutable,
}

/// Authenticates the request, then routes it by class and scope.
pub fn dispatch(
    req: &Request,
    certs: &Repository<NodeId, Certificate>,
    reader: &Principal,
) -> Route {
    if let AuthDecision::Denied(reason) = authenticate_request(req, certs, reader) {
        return Route::Terminated {
            reason: TerminationReason::Denied(reason),
        };
    }
    match (req.class, req.scope) {
        (RequestClass::ServiceRequest, _) => Route::Demand,
        (RequestClass::Feedback, _) => Route::Feedback,
        (RequestClass::Security, Scope::IntraDomain) => Route::Security,
        (RequestClass::Security, Scope::InterDomain) => Route::Terminated {
            reason: TerminationReason::Unroutable,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        DemandRequest, Feedback, Journal, Payload, RepoKind, RepoScope, SecurityAttributes, TxId,
    };
    use proptest::prelude::*;

    fn ids(v: &[u32]) -> Vec<NodeId> {
        v.iter().copied().map(NodeId).collect()
    }

    #[test]
    fn highest_live_ids_win() {
        let ring = ids(&[3, 7, 5]);
        let e = ring_elect(&ring, |_| true).unwrap();
        assert_eq!((e.leader, e.backup), (NodeId(7), Some(NodeId(5))));
        let e = ring_elect(&ring, |n| n != NodeId(7)).unwrap();
        assert_eq!((e.leader, e.backup), (NodeId(5), Some(NodeId(3))));
        let e = ring_elect(&ids(&[4]), |_| true).unwrap();
        assert_eq!((e.leader, e.backup), (NodeId(4), None));
        assert_eq!(ring_elect(&ring, |_| false), Err(ClusterError::EmptyRing));
    }

    fn grid() -> Membership {
        let (d1, d2) = (DomainId::new("d1"), DomainId::new("d2"));
        let (a, b) = (ids(&[1, 2, 3]), ids(&[4, 5, 6]));
        Membership::bootstrap([(&d1, a.as_slice()), (&d2, b.as_slice())])
            .unwrap()
            .0
    }

    #[test]
    fn joining_domain_keeps_grid_managers() {
        let mut m = grid();
        m.add_domain(&DomainId::new("d3"), &ids(&[7, 8])).unwrap();
        assert_eq!(m.grm, Some(NodeId(6)));
        assert_eq!(m.dtm_of(&DomainId::new("d3")), Some(NodeId(8)));
        assert!(matches!(
            m.add_domain(&DomainId::new("d4"), &ids(&[8])),
            Err(ClusterError::DuplicateMember(..))
        ));
    }

    #[test]
    fn bootstrap_elects_every_slot() {
        let m = grid();
        assert_eq!(m.dtm_of(&DomainId::new("d1")), Some(NodeId(3)));
        assert_eq!(m.dtm_of(&DomainId::new("d2")), Some(NodeId(6)));
        assert_eq!((m.grm, m.grm_backup), (Some(NodeId(6)), Some(NodeId(3))));
        assert!(m.roles_of(NodeId(6)).contains(&Role::Grm));
        assert!(m.roles_of(NodeId(6)).contains(&Role::Dtm));
        m.check().unwrap();
    }

    #[test]
    fn grm_crash_promotes_backup_and_refills() {
        let mut m = grid();
        let changes = m.failover(NodeId(6));
        assert_eq!(m.dtm_of(&DomainId::new("d2")), Some(NodeId(5)));
        assert_eq!(m.grm, Some(NodeId(3)));
        assert_eq!(m.grm_backup, Some(NodeId(5)));
        assert!(changes.iter().any(|c| matches!(
            c,
            MembershipChange::Promoted {
                role: Role::Grm,
                to: NodeId(3),
                ..
            }
        )));
        m.check().unwrap();
    }

    #[test]
    fn backup_crash_only_refills_backup() {
        let mut m = grid();
        m.failover(NodeId(2));
        let d1 = &m.domains[&DomainId::new("d1")];
        assert_eq!((d1.dtm, d1.backup), (Some(NodeId(3)), Some(NodeId(1))));
        assert_eq!(m.grm, Some(NodeId(6)));
    }

    #[test]
    fn losing_leader_and_backup_reelects() {
        let mut m = grid();
        m.liveness.insert(NodeId(3), Liveness::Down);
        m.failover(NodeId(2));
        let d1 = &m.domains[&DomainId::new("d1")];
        assert_eq!((d1.dtm, d1.backup), (Some(NodeId(1)), None));
        m.failover(NodeId(1));
        assert!(m.domains[&DomainId::new("d1")].offline);
        m.check().unwrap();
    }

    #[test]
    fn recovered_node_does_not_preempt() {
        let mut m = grid();
        m.failover(NodeId(3));
        m.recover(NodeId(3));
        let d1 = &m.domains[&DomainId::new("d1")];
        assert_eq!(d1.dtm, Some(NodeId(2)));
        assert_eq!(d1.backup, Some(NodeId(1)));
        m.failover(NodeId(1));
        assert_eq!(m.domains[&DomainId::new("d1")].backup, Some(NodeId(3)));
    }

    fn certs_with(origin: u32) -> (Repository<NodeId, Certificate>, Principal) {
        let d = DomainId::new("d1");
        let dtm = Principal::Dtm { domain: d.clone() };
        let mut certs = Repository::new(RepoScope::domain(RepoKind::Certificate, d));
        let cert = Certificate {
            subject_id: NodeId(origin),
            issuer_id: "grid-ca".into(),
            credential: "tok".into(),
            valid: true,
        };
        certs
            .put(&dtm, NodeId(origin), cert, 0.0, &mut Journal::new())
            .unwrap();
        (certs, dtm)
    }

    fn request(class: RequestClass, scope: Scope) -> Request {
        let payload = match class {
            RequestClass::ServiceRequest => Payload::Demand(DemandRequest {
                request_id: 1,
                client_id: "c".into(),
                dp: [50.0; 6],
                service_type: "compute".into(),
            }),
            RequestClass::Feedback => {
                Payload::Feedback(Feedback::pending(TxId(1), NodeId(5), "c", [0.5; 6], 0.0))
            }
            RequestClass::Security => Payload::Security {
                attributes: SecurityAttributes::new([0.5; 6]).unwrap(),
            },
        };
        Request {
            origin: NodeId(3),
            class,
            scope,
            payload,
            target: NodeId(3),
            service_type: "compute".into(),
        }
    }

    #[test]
    fn decision_tree() {
        let (certs, dtm) = certs_with(3);
        assert_eq!(
            dispatch(
                &request(RequestClass::ServiceRequest, Scope::InterDomain),
                &certs,
                &dtm
            ),
            Route::Demand
        );
        assert_eq!(
            dispatch(
                &request(RequestClass::Feedback, Scope::IntraDomain),
                &certs,
                &dtm
            ),
            Route::Feedback
        );
        assert_eq!(
            dispatch(
                &request(RequestClass::Security, Scope::IntraDomain),
                &certs,
                &dtm
            ),
            Route::Security
        );
        assert_eq!(
            dispatch(
                &request(RequestClass::Security, Scope::InterDomain),
                &certs,
                &dtm
            ),
            Route::Terminated {
                reason: TerminationReason::Unroutable
            }
        );
        let (other, dtm) = certs_with(9);
        assert_eq!(
            dispatch(
                &request(RequestClass::ServiceRequest, Scope::IntraDomain),
                &other,
                &dtm
            ),
            Route::Terminated {
                reason: TerminationReason::Denied(DenyReason::NoCertificate)
            }
        );
    }

    proptest! {
        #[test]
        fn election_matches_sorted_live_ids(ring in proptest::collection::btree_set(0u32..50, 1..12), down in proptest::collection::vec(any::<bool>(), 12)) {
            let ring: Vec<NodeId> = ring.into_iter().map(NodeId).collect();
            let live: Vec<NodeId> = ring.iter().enumerate().filter(|(i, _)| !down[*i]).map(|(_, &n)| n).collect();
            let out = ring_elect(&ring, |n| live.contains(&n));
            let mut sorted = live.clone();
            sorted.sort_unstable_by(|a, b| b.cmp(a));
            match out {
                Ok(e) => {
                    prop_assert_eq!(e.leader, sorted[0]);
                    prop_assert_eq!(e.backup, sorted.get(1).copied());
                    prop_assert!(e.messages <= 2 * ring.len());
                }
                Err(_) => prop_assert!(live.is_empty()),
            }
        }

        #[test]
        fn any_crash_sequence_keeps_slots_consistent(ops in proptest::collection::vec((1u32..=6, any::<bool>()), 0..30)) {
            let mut m = grid();
            for (node, crash) in ops {
                if crash { m.failover(NodeId(node)); } else { m.recover(NodeId(node)); }
                prop_assert!(m.check().is_ok(), "{:?}", m.check());
            }
        }
    }
}
