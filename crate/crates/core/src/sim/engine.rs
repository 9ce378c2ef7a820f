use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scenario::{BehaviorProfile, ClientSpec, EventSpec, Scenario, ScenarioError};
use super::trace::{JoinStatus, MetricsTrace, TraceRecord, VerdictKind};
use super::workload::{generate_workload, Arrival};
use crate::cluster::{dispatch, ClusterError, Membership, MembershipChange, Route};
use crate::demand_eval::{
    allocate, batch_evaluate, candidates, selection_table, Batch, DemandError,
};
use crate::feedback_eval::{screen, update_repository, FeedbackError, FeedbackPipeline, TxInfo};
use crate::model::{
    Certificate, DemandRequest, DomainId, Feedback, FeedbackVerdict, NodeId, Payload, PolicySet,
    Principal, RepoError, Request, RequestClass, Scope, SecurityAttributes, SimTime, Store,
    TrustRecord, TxId, PARAM_COUNT,
};
use crate::security_mgmt::{
    register_dtm_certificate, self_defense, DefenseScore, SecurityError, SecurityWeights,
};
use crate::trust_eval::{evaluate_and_store, monitor_sweep, RecommendationTally, TrustError};
use crate::upper_level::{
    add_domain, register_domain, JoinContext, JoinOutcome, JoinRequest, Recipient, UpperError,
};

/// Issuer named on the certificates the grid hands to domain managers.
pub const GRID_CERT_ISSUER: &str = "grid";

const SP_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("invariant violated at t={time}: {what}")]
    Invariant { time: SimTime, what: String },
    #[error(transparent)]
    Trust(#[from] TrustError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Security(#[from] SecurityError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Upper(#[from] UpperError),
}

#[derive(Clone, Debug, PartialEq)]
enum EventKind {
    Arrival(usize),
    FeedbackIssue(TxId),
    Heartbeat,
    SweepTick,
    Crash(NodeId),
    Recover(NodeId),
    JoinDomain(usize),
    SecurityUpdate(usize),
    BatchFlush(DomainId),
}

#[derive(Clone, Debug)]
struct Event {
    time: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.seq.cmp(&other.seq))
    }
}

/// Work waiting for a domain manager to come back.
#[derive(Clone, Debug)]
enum Parked {
    Arrival(usize),
    Flush,
    Feedback(Feedback),
    Security(usize),
}

#[derive(Clone, Debug)]
struct DomainState {
    tallies: BTreeMap<NodeId, RecommendationTally>,
    ledger: BTreeMap<TxId, TxInfo>,
    pipeline: FeedbackPipeline,
    batch: Vec<usize>,
    flush_pending: bool,
    parked: VecDeque<Parked>,
    security: SecurityAttributes,
    defense: DefenseScore,
}

#[derive(Clone, Debug)]
struct Tx {
    request: DemandRequest,
    provider: NodeId,
    domain: DomainId,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub arrivals: u64,
    pub allocations: u64,
    pub rejected: u64,
}

/// Discrete-event engine. Events run strictly in `(time, seq)` order and
/// nothing runs after the scenario's duration.
pub struct Engine {
    sc: Scenario,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: SimTime,
    store: Store,
    membership: Membership,
    up: BTreeSet<NodeId>,
    last_seen: BTreeMap<NodeId, SimTime>,
    domains: BTreeMap<DomainId, DomainState>,
    arrivals: Vec<Arrival>,
    clients: BTreeMap<String, ClientSpec>,
    behavior: BTreeMap<NodeId, BehaviorProfile>,
    txs: BTreeMap<TxId, Tx>,
    deferred_joins: Vec<usize>,
    weights: SecurityWeights,
    counts: Counts,
    trace: MetricsTrace,
    finished: bool,
}

fn dtm(domain: &DomainId) -> Principal {
    Principal::Dtm {
        domain: domain.clone(),
    }
}

impl Engine {
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        let violations = scenario.validate();
        if !violations.is_empty() {
            return Err(ScenarioError::Invalid(violations).into());
        }
        let sc = scenario.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
        let arrivals = generate_workload(&sc.workload, sc.duration, &mut rng);
        let mut engine = Self {
            rng,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            store: Store::new(),
            membership: Membership::new(),
            up: BTreeSet::new(),
            last_seen: BTreeMap::new(),
            domains: BTreeMap::new(),
            clients: sc
                .workload
                .clients
                .iter()
                .map(|c| (c.id.clone(), c.clone()))
                .collect(),
            behavior: sc
                .workload
                .providers
                .iter()
                .map(|p| (NodeId(p.node), BehaviorProfile::from(p)))
                .collect(),
            txs: BTreeMap::new(),
            deferred_joins: Vec::new(),
            weights: sc.security.weights(),
            counts: Counts::default(),
            trace: MetricsTrace::new(sc.seed, sc.duration),
            finished: false,
            arrivals,
            sc,
        };
        engine.bootstrap()?;
        Ok(engine)
    }

    fn bootstrap(&mut self) -> Result<(), SimError> {
        let mut rings = Vec::new();
        for spec in self.sc.domains.clone() {
            let profile = spec
                .to_profile(&self.sc.security.scales)
                .map_err(|e| ScenarioError::Invalid(vec![format!("domains: {e}")]))?;
            register_domain(&mut self.store, &profile, 0.0)?;
            self.add_domain_state(&profile.domain_id, profile.security.clone());
            for &n in &profile.node_ids {
                self.up.insert(n);
                self.last_seen.insert(n, 0.0);
            }
            rings.push((profile.domain_id.clone(), profile.node_ids.clone()));
        }
        let (membership, changes) =
            Membership::bootstrap(rings.iter().map(|(d, n)| (d, n.as_slice())))?;
        self.membership = membership;
        self.after_membership_change(changes)?;

        for i in 0..self.arrivals.len() {
            let t = self.arrivals[i].time;
            self.schedule(t, EventKind::Arrival(i));
        }
        for (i, e) in self.sc.events.clone().iter().enumerate() {
            let kind = match e {
                EventSpec::Crash { node, .. } => EventKind::Crash(NodeId(*node)),
                EventSpec::Recover { node, .. } => EventKind::Recover(NodeId(*node)),
                EventSpec::JoinDomain { .. } => EventKind::JoinDomain(i),
                EventSpec::SecurityUpdate { .. } => EventKind::SecurityUpdate(i),
            };
            self.schedule(e.at(), kind);
        }
        self.schedule(self.sc.cluster.heartbeat_period, EventKind::Heartbeat);
        self.schedule(self.sc.trust.sweep_period, EventKind::SweepTick);
        self.check_invariants()
    }

    fn add_domain_state(&mut self, id: &DomainId, security: SecurityAttributes) {
        let defense = self_defense(&security, &self.weights);
        self.domains.insert(
            id.clone(),
            DomainState {
                tallies: BTreeMap::new(),
                ledger: BTreeMap::new(),
                pipeline: FeedbackPipeline::new(self.sc.feedback.clone()),
                batch: Vec::new(),
                flush_pending: false,
                parked: VecDeque::new(),
                security,
                defense,
            },
        );
    }

    fn schedule(&mut self, time: SimTime, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Reverse(Event {
            time,
            seq: self.seq,
            kind,
        }));
    }

    fn record(&mut self, r: TraceRecord) {
        self.trace.push(self.now, r);
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn membership(&self) -> &Membership {
        &self.membership
    }

    pub fn trace(&self) -> &MetricsTrace {
        &self.trace
    }

    pub fn counts(&self) -> Counts {
        self.counts
    }

    pub fn is_up(&self, node: NodeId) -> bool {
        self.up.contains(&node)
    }

    /// Time of the next event that will run, if any.
    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue
            .peek()
            .map(|Reverse(e)| e.time)
            .filter(|&t| t <= self.sc.duration)
    }

    /// Runs one event; `false` once the run is over.
    pub fn step(&mut self) -> Result<bool, SimError> {
        let Some(Reverse(ev)) = self.queue.pop() else {
            return Ok(false);
        };
        if ev.time > self.sc.duration {
            self.queue.clear();
            return Ok(false);
        }
        self.now = ev.time;
        match ev.kind {
            EventKind::Arrival(i) => self.on_arrival(i)?,
            EventKind::FeedbackIssue(tx) => self.on_feedback_issue(tx)?,
            EventKind::Heartbeat => self.on_heartbeat()?,
            EventKind::SweepTick => self.on_sweep()?,
            EventKind::Crash(n) => {
                if self.up.remove(&n) {
                    self.record(TraceRecord::Crash { node: n });
                }
            }
            EventKind::Recover(n) => {
                if self.last_seen.contains_key(&n) && self.up.insert(n) {
                    self.record(TraceRecord::Recover { node: n });
                }
            }
            EventKind::JoinDomain(i) => self.on_join(i)?,
            EventKind::SecurityUpdate(i) => self.submit_security(i)?,
            EventKind::BatchFlush(d) => {
                if let Some(s) = self.domains.get_mut(&d) {
                    s.flush_pending = false;
                }
                self.flush(&d)?;
            }
        }
        self.check_invariants()?;
        Ok(true)
    }

    /// Runs every event with time `<= t`.
    pub fn run_until(&mut self, t: SimTime) -> Result<(), SimError> {
        while self.peek_time().is_some_and(|next| next <= t) {
            self.step()?;
        }
        Ok(())
    }

    /// Runs to the end and closes the trace.
    pub fn finish(mut self) -> Result<SimOutput, SimError> {
        while self.step()? {}
        if !self.finished {
            self.finished = true;
            self.now = self.sc.duration;
            let in_flight = self.in_flight();
            let c = self.counts;
            self.record(TraceRecord::End {
                arrivals: c.arrivals,
                allocations: c.allocations,
                rejected: c.rejected,
                in_flight,
            });
        }
        let summary = Summary::from_trace(&self.trace, &self.store);
        Ok(SimOutput {
            trace: self.trace,
            store: self.store,
            membership: self.membership,
            summary,
        })
    }

    fn in_flight(&self) -> u64 {
        self.domains
            .values()
            .map(|d| {
                d.batch.len() as u64
                    + d.parked
                        .iter()
                        .filter(|p| matches!(p, Parked::Arrival(_)))
                        .count() as u64
            })
            .sum()
    }

    fn reject(&mut self, request: u64, reason: String) {
        self.counts.rejected += 1;
        self.record(TraceRecord::Rejected { request, reason });
    }

    /// `Some(reason)` if the domain cannot take work at all; parks nothing.
    fn unavailable(&self, domain: &DomainId) -> Option<String> {
        match self.membership.domains.get(domain) {
            None => Some(format!("unknown domain {domain}")),
            Some(r) if r.offline => Some(format!("domain {domain} is offline")),
            _ => None,
        }
    }

    /// The domain's DTM per membership, if that node is actually running.
    fn running_dtm(&self, domain: &DomainId) -> Option<NodeId> {
        self.membership
            .dtm_of(domain)
            .filter(|n| self.up.contains(n))
    }

    fn park(&mut self, domain: &DomainId, item: Parked) {
        let what = match &item {
            Parked::Arrival(i) => format!("request {}", self.arrivals[*i].request_id),
            Parked::Flush => "batch".to_string(),
            Parked::Feedback(fb) => format!("feedback for tx {}", fb.tx_id.0),
            Parked::Security(i) => format!("security update {i}"),
        };
        let state = self.domains.get_mut(domain).expect("known domain");
        if matches!(item, Parked::Flush) && state.parked.iter().any(|p| matches!(p, Parked::Flush))
        {
            return;
        }
        state.parked.push_back(item);
        self.record(TraceRecord::Parked {
            domain: domain.to_string(),
            what,
        });
    }

    fn on_arrival(&mut self, i: usize) -> Result<(), SimError> {
        self.counts.arrivals += 1;
        let a = &self.arrivals[i];
        let client = &self.clients[&a.client];
        self.record(TraceRecord::Arrival {
            request: a.request_id,
            client: a.client.clone(),
            domain: client.target.clone(),
        });
        self.submit_arrival(i)
    }

    fn submit_arrival(&mut self, i: usize) -> Result<(), SimError> {
        let a = self.arrivals[i].clone();
        let client = self.clients[&a.client].clone();
        let target = DomainId::new(client.target.clone());
        let home = DomainId::new(client.home.clone());
        if let Some(reason) = self.unavailable(&target) {
            self.reject(a.request_id, reason);
            return Ok(());
        }
        let Some(target_dtm) = self.running_dtm(&target) else {
            self.park(&target, Parked::Arrival(i));
            return Ok(());
        };
        let Some(origin) = self.membership.dtm_of(&home) else {
            self.reject(a.request_id, format!("home domain {home} has no manager"));
            return Ok(());
        };
        let req = Request {
            origin,
            class: RequestClass::ServiceRequest,
            scope: if home == target {
                Scope::IntraDomain
            } else {
                Scope::InterDomain
            },
            payload: Payload::Demand(DemandRequest {
                request_id: a.request_id,
                client_id: a.client.clone(),
                dp: a.dp,
                service_type: client.service_type.clone(),
            }),
            target: target_dtm,
            service_type: client.service_type.clone(),
        };
        match dispatch(
            &req,
            &self.store.domains[&target].certificates,
            &dtm(&target),
        ) {
            Route::Demand => {
                let state = self.domains.get_mut(&target).expect("known domain");
                state.batch.push(i);
                if state.batch.len() >= self.sc.demand.batch_size {
                    self.flush(&target)?;
                } else if !state.flush_pending {
                    state.flush_pending = true;
                    let at = self.now + self.sc.demand.flush_timeout;
                    self.schedule(at, EventKind::BatchFlush(target));
                }
            }
            Route::Terminated { reason } => {
                self.reject(a.request_id, format!("terminated: {reason:?}"))
            }
            other => unreachable!("service request routed to {other:?}"),
        }
        Ok(())
    }

    fn flush(&mut self, domain: &DomainId) -> Result<(), SimError> {
        if self.domains[domain].batch.is_empty() {
            return Ok(());
        }
        if self.running_dtm(domain).is_none() {
            self.park(domain, Parked::Flush);
            return Ok(());
        }
        let batch = std::mem::take(&mut self.domains.get_mut(domain).expect("known domain").batch);
        let reader = dtm(domain);
        let ring = self.membership.domains[domain].ring.clone();
        let mut records: Vec<TrustRecord> = Vec::new();
        for n in ring {
            if self.membership.is_up(n) && self.behavior.contains_key(&n) {
                records.push(self.store.domains[domain].trust.get(&reader, &n)?.clone());
            }
        }
        if records.is_empty() {
            for i in batch {
                let id = self.arrivals[i].request_id;
                self.reject(id, format!("no eligible provider in {domain}"));
            }
            return Ok(());
        }
        let table = selection_table(&records);
        self.check_shares(&table.sp, "selection sp")?;
        self.check_unit(&table.tv, "selection tv")?;
        self.record(TraceRecord::Selection {
            domain: domain.to_string(),
            providers: table.providers.clone(),
            tv: table.tv.clone(),
            sp: table.sp.clone(),
        });
        let requests: Vec<DemandRequest> = batch
            .iter()
            .map(|&i| {
                let a = &self.arrivals[i];
                DemandRequest {
                    request_id: a.request_id,
                    client_id: a.client.clone(),
                    dp: a.dp,
                    service_type: self.clients[&a.client].service_type.clone(),
                }
            })
            .collect();
        let rows = batch_evaluate(
            &Batch {
                requests: requests.clone(),
            },
            &records,
        );
        for (req, row) in requests.into_iter().zip(rows) {
            let dtv = match row {
                Ok(dtv) => dtv,
                Err(e) => {
                    self.reject(req.request_id, e.to_string());
                    continue;
                }
            };
            self.check_unit(&dtv.dtv, "dtv")?;
            let cands = candidates(&dtv, self.sc.demand.candidates);
            let alloc = allocate(&cands, &table, &mut self.rng)?;
            self.check_shares(&alloc.slice, "candidate slice")?;
            let tx = TxId(self.counts.allocations + 1);
            self.counts.allocations += 1;
            let state = self.domains.get_mut(domain).expect("known domain");
            state.ledger.insert(
                tx,
                TxInfo {
                    client_id: req.client_id.clone(),
                    provider: alloc.chosen,
                },
            );
            self.record(TraceRecord::Allocation {
                request: req.request_id,
                client: req.client_id.clone(),
                domain: domain.to_string(),
                tx: tx.0,
                providers: dtv.providers.clone(),
                dtv: dtv.dtv.clone(),
                candidates: cands,
                slice: alloc.slice,
                chosen: alloc.chosen,
            });
            self.txs.insert(
                tx,
                Tx {
                    request: req,
                    provider: alloc.chosen,
                    domain: domain.clone(),
                },
            );
            let at = self.now + self.sc.workload.service_time;
            self.schedule(at, EventKind::FeedbackIssue(tx));
        }
        Ok(())
    }

    fn on_feedback_issue(&mut self, tx: TxId) -> Result<(), SimError> {
        let t = self.txs[&tx].clone();
        if !self.up.contains(&t.provider) {
            self.record(TraceRecord::ServiceFailed {
                tx: tx.0,
                provider: t.provider,
            });
            return Ok(());
        }
        let quality = self.behavior[&t.provider].quality_at(self.now);
        let eta = self.sc.workload.noise;
        let mut ratings = [0.0; PARAM_COUNT];
        for (r, q) in ratings.iter_mut().zip(quality) {
            let u: f64 = self.rng.gen();
            *r = (q + eta * (2.0 * u - 1.0)).clamp(0.0, 1.0);
        }
        let outlier: f64 = self.rng.gen();
        if outlier < self.clients[&t.request.client_id].outlier_probability {
            ratings = [0.0; PARAM_COUNT];
        }
        let fb = Feedback::pending(
            tx,
            t.provider,
            t.request.client_id.clone(),
            ratings,
            self.now,
        );
        self.submit_feedback(&t.domain, fb)
    }

    fn submit_feedback(&mut self, domain: &DomainId, fb: Feedback) -> Result<(), SimError> {
        if self.unavailable(domain).is_some() || self.running_dtm(domain).is_none() {
            self.park(domain, Parked::Feedback(fb));
            return Ok(());
        }
        let client = self.clients[&fb.client_id].clone();
        let home = DomainId::new(client.home.clone());
        let Some(origin) = self.membership.dtm_of(&home) else {
            self.record(TraceRecord::Terminated {
                class: RequestClass::Feedback,
                domain: domain.to_string(),
                reason: crate::cluster::TerminationReason::Denied(
                    crate::security_mgmt::DenyReason::NoCertificate,
                ),
            });
            return Ok(());
        };
        let req = Request {
            origin,
            class: RequestClass::Feedback,
            scope: if &home == domain {
                Scope::IntraDomain
            } else {
                Scope::InterDomain
            },
            target: fb.provider,
            payload: Payload::Feedback(fb.clone()),
            service_type: client.service_type.clone(),
        };
        match dispatch(&req, &self.store.domains[domain].certificates, &dtm(domain)) {
            Route::Feedback => {
                self.domains
                    .get_mut(domain)
                    .expect("known domain")
                    .pipeline
                    .collect(fb)?;
                self.drain_feedback(domain)
            }
            Route::Terminated { reason } => {
                self.record(TraceRecord::Terminated {
                    class: RequestClass::Feedback,
                    domain: domain.to_string(),
                    reason,
                });
                Ok(())
            }
            other => unreachable!("feedback routed to {other:?}"),
        }
    }

    fn drain_feedback(&mut self, domain: &DomainId) -> Result<(), SimError> {
        let writer = dtm(domain);
        loop {
            let state = self.domains.get_mut(domain).expect("known domain");
            let Some(fb) = state.pipeline.pop() else {
                return Ok(());
            };
            if let Err(reason) = screen(&fb, &state.ledger, self.now, &state.pipeline.config) {
                self.record(TraceRecord::Discarded {
                    tx: fb.tx_id.0,
                    provider: fb.provider,
                    reason,
                });
                continue;
            }
            let verified = state.pipeline.verify(&fb);
            let verdict = match verified.verdict {
                FeedbackVerdict::Rectified { .. } => VerdictKind::Rectified,
                _ => VerdictKind::Verified,
            };
            let repos = self.store.domains.get_mut(domain).expect("known domain");
            update_repository(
                &verified,
                repos,
                &writer,
                &mut state.pipeline.history,
                self.now,
                &mut self.store.journal,
            )?;
            let demand = self.txs[&fb.tx_id].request.clone();
            let c = evaluate_and_store(
                &verified,
                &demand,
                &mut repos.trust,
                &writer,
                &mut state.tallies,
                state.defense,
                &self.sc.trust,
                self.now,
                &mut self.store.journal,
            )?;
            self.trace.push(
                self.now,
                TraceRecord::Verdict {
                    tx: fb.tx_id.0,
                    provider: fb.provider,
                    client: fb.client_id.clone(),
                    verdict,
                    original: fb.ratings,
                    ratings: verified.ratings,
                },
            );
            self.check_unit(&[c.s, c.re, c.sd, c.tv, c.t_new], "trust components")?;
            self.record(TraceRecord::TrustUpdate {
                domain: domain.to_string(),
                c,
            });
        }
    }

    fn on_heartbeat(&mut self) -> Result<(), SimError> {
        for &n in &self.up {
            self.last_seen.insert(n, self.now);
        }
        let timeout = self.sc.cluster.heartbeat_timeout;
        let mut changes = Vec::new();
        let nodes: Vec<NodeId> = self.membership.liveness.keys().copied().collect();
        for n in nodes {
            let alive = self.up.contains(&n);
            if !self.membership.is_up(n) && alive {
                changes.extend(self.membership.recover(n));
            } else if self.membership.is_up(n) && self.now - self.last_seen[&n] >= timeout {
                changes.extend(self.membership.failover(n));
            }
        }
        self.record(TraceRecord::Heartbeat { up: self.up.len() });
        if !changes.is_empty() {
            self.after_membership_change(changes)?;
        }
        let next = self.now + self.sc.cluster.heartbeat_period;
        self.schedule(next, EventKind::Heartbeat);
        Ok(())
    }

    fn after_membership_change(&mut self, changes: Vec<MembershipChange>) -> Result<(), SimError> {
        for change in changes {
            self.record(TraceRecord::Membership { change });
        }
        self.refresh_certificates()?;
        let ready: Vec<DomainId> = self
            .domains
            .iter()
            .filter(|(_, s)| !s.parked.is_empty())
            .map(|(d, _)| d.clone())
            .filter(|d| self.running_dtm(d).is_some())
            .collect();
        for d in ready {
            let items = std::mem::take(&mut self.domains.get_mut(&d).expect("known domain").parked);
            self.record(TraceRecord::Redispatched {
                domain: d.to_string(),
                dtm: self.membership.dtm_of(&d).expect("running manager"),
                items: items.len(),
            });
            for item in items {
                match item {
                    Parked::Arrival(i) => self.submit_arrival(i)?,
                    Parked::Flush => self.flush(&d)?,
                    Parked::Feedback(fb) => self.submit_feedback(&d, fb)?,
                    Parked::Security(i) => self.submit_security(i)?,
                }
            }
        }
        if self.membership.grm.is_some_and(|g| self.up.contains(&g))
            && !self.deferred_joins.is_empty()
        {
            for i in std::mem::take(&mut self.deferred_joins) {
                self.on_join(i)?;
            }
        }
        Ok(())
    }

    /// Every domain's certificate repository holds a certificate for every
    /// current DTM and DTM backup.
    fn refresh_certificates(&mut self) -> Result<(), SimError> {
        let managers: BTreeSet<NodeId> = self
            .membership
            .domains
            .values()
            .flat_map(|r| [r.dtm, r.backup])
            .flatten()
            .collect();
        for (domain, repos) in self.store.domains.iter_mut() {
            let writer = dtm(domain);
            for &m in &managers {
                if repos.certificates.contains(&writer, &m)? {
                    continue;
                }
                let cert = Certificate {
                    subject_id: m,
                    issuer_id: GRID_CERT_ISSUER.to_string(),
                    credential: format!("dtm-{m}"),
                    valid: true,
                };
                register_dtm_certificate(
                    &mut repos.certificates,
                    &writer,
                    cert,
                    &managers,
                    self.now,
                    &mut self.store.journal,
                )?;
            }
        }
        Ok(())
    }

    fn on_sweep(&mut self) -> Result<(), SimError> {
        let ids: Vec<DomainId> = self.domains.keys().cloned().collect();
        for d in ids {
            if self.running_dtm(&d).is_none() {
                continue;
            }
            let state = self.domains.get_mut(&d).expect("known domain");
            let repos = self.store.domains.get_mut(&d).expect("known domain");
            let out = monitor_sweep(
                &mut repos.trust,
                &dtm(&d),
                self.now,
                self.sc.trust.staleness,
                &self.sc.trust.decay(),
                &state.security,
                &self.weights,
                &mut self.store.journal,
            )?;
            state.defense = out.defense;
            let sd = out.defense.value();
            let t_new: Vec<f64> = out.reevaluated.iter().map(|u| u.t_new).collect();
            self.check_unit(&t_new, "swept trust")?;
            self.check_unit(&[sd], "self-defense")?;
            self.record(TraceRecord::Sweep {
                domain: d.to_string(),
                sd,
                updates: out.reevaluated,
            });
        }
        let next = self.now + self.sc.trust.sweep_period;
        self.schedule(next, EventKind::SweepTick);
        Ok(())
    }

    fn on_join(&mut self, i: usize) -> Result<(), SimError> {
        let EventSpec::JoinDomain { domain: spec, .. } = self.sc.events[i].clone() else {
            unreachable!("join event index");
        };
        if !self.membership.grm.is_some_and(|g| self.up.contains(&g)) {
            self.deferred_joins.push(i);
            self.record(TraceRecord::Join {
                domain: spec.id.clone(),
                status: JoinStatus::Deferred,
                verdict: None,
                refusal: None,
            });
            return Ok(());
        }
        let profile = spec
            .to_profile(&self.sc.security.scales)
            .map_err(|e| ScenarioError::Invalid(vec![format!("events[{i}].domain: {e}")]))?;
        let recipients: Vec<Recipient> = self
            .membership
            .domains
            .values()
            .flat_map(|r| [r.dtm, r.backup])
            .flatten()
            .map(|node| Recipient {
                node,
                live: self.up.contains(&node),
            })
            .collect();
        let ctx = JoinContext {
            grid_policies: PolicySet::from_predicates(self.sc.grid_policies.iter().cloned()),
            trusted_issuers: self.sc.trusted_issuers.iter().cloned().collect(),
            recipients,
        };
        match add_domain(
            &mut self.store,
            &JoinRequest {
                profile: profile.clone(),
            },
            &ctx,
            self.now,
        ) {
            JoinOutcome::Joined { verdict, receipts } => {
                let id = profile.domain_id.clone();
                self.add_domain_state(&id, profile.security.clone());
                for &n in &profile.node_ids {
                    self.up.insert(n);
                    self.last_seen.insert(n, self.now);
                }
                let changes = self.membership.add_domain(&id, &profile.node_ids)?;
                self.record(TraceRecord::Join {
                    domain: id.to_string(),
                    status: JoinStatus::Joined,
                    verdict: Some(verdict),
                    refusal: None,
                });
                self.record(TraceRecord::Propagation {
                    domain: id.to_string(),
                    receipts,
                });
                self.after_membership_change(changes)?;
            }
            JoinOutcome::Refused(refusal) => {
                self.record(TraceRecord::Join {
                    domain: spec.id.clone(),
                    status: JoinStatus::Refused,
                    verdict: None,
                    refusal: Some(refusal),
                });
            }
        }
        Ok(())
    }

    fn submit_security(&mut self, i: usize) -> Result<(), SimError> {
        let EventSpec::SecurityUpdate {
            domain,
            security,
            scope,
            ..
        } = self.sc.events[i].clone()
        else {
            unreachable!("security event index");
        };
        let d = DomainId::new(domain);
        if self.unavailable(&d).is_some() {
            return Ok(());
        }
        let Some(manager) = self.running_dtm(&d) else {
            self.park(&d, Parked::Security(i));
            return Ok(());
        };
        let attributes = security
            .resolve(&self.sc.security.scales)
            .map_err(|e| ScenarioError::Invalid(vec![format!("events[{i}].security: {e}")]))?;
        let req = Request {
            origin: manager,
            class: RequestClass::Security,
            scope,
            payload: Payload::Security {
                attributes: attributes.clone(),
            },
            target: manager,
            service_type: String::new(),
        };
        match dispatch(&req, &self.store.domains[&d].certificates, &dtm(&d)) {
            Route::Security => {
                let df = self_defense(&attributes, &self.weights).value();
                self.record(TraceRecord::SecurityUpdate {
                    domain: d.to_string(),
                    sa: *attributes.values(),
                    df,
                });
                self.domains.get_mut(&d).expect("known domain").security = attributes;
            }
            Route::Terminated { reason } => self.record(TraceRecord::Terminated {
                class: RequestClass::Security,
                domain: d.to_string(),
                reason,
            }),
            other => unreachable!("security request routed to {other:?}"),
        }
        Ok(())
    }

    fn violation(&self, what: String) -> SimError {
        SimError::Invariant {
            time: self.now,
            what,
        }
    }

    fn check_unit(&self, xs: &[f64], what: &str) -> Result<(), SimError> {
        match xs.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            Some(x) => Err(self.violation(format!("{what} value {x} outside [0, 1]"))),
            None => Ok(()),
        }
    }

    fn check_shares(&self, sp: &[f64], what: &str) -> Result<(), SimError> {
        self.check_unit(sp, what)?;
        let sum: f64 = sp.iter().sum();
        if (sum - 1.0).abs() > SP_TOLERANCE {
            return Err(self.violation(format!("{what} sums to {sum}")));
        }
        Ok(())
    }

    fn check_invariants(&self) -> Result<(), SimError> {
        for r in self.store.all_trust_records() {
            if r.check().is_err() {
                return Err(
                    self.violation(format!("trust record of node {} out of range", r.node_id))
                );
            }
        }
        self.membership.check().map_err(|e| self.violation(e))?;
        let c = self.counts;
        let in_flight = self.in_flight();
        if c.arrivals != c.allocations + c.rejected + in_flight {
            return Err(self.violation(format!(
                "conservation: {} arrivals != {} allocated + {} rejected + {} in flight",
                c.arrivals, c.allocations, c.rejected, in_flight
            )));
        }
        Ok(())
    }
}

/// Result of a complete run.
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub trace: MetricsTrace,
    pub store: Store,
    pub membership: Membership,
    pub summary: Summary,
}

/// Headline numbers of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub arrivals: u64,
    pub allocations: u64,
    pub rejected: u64,
    pub in_flight: u64,
    pub final_trust: BTreeMap<NodeId, f64>,
    pub allocations_by_provider: BTreeMap<NodeId, u64>,
    pub allocation_share: BTreeMap<NodeId, f64>,
    pub verified: u64,
    pub rectified: u64,
    pub discarded: u64,
    pub service_failed: u64,
}

impl Summary {
    pub fn from_trace(trace: &MetricsTrace, store: &Store) -> Self {
        let mut s = Summary {
            seed: trace.header.seed,
            arrivals: 0,
            allocations: 0,
            rejected: 0,
            in_flight: 0,
            final_trust: store
                .all_trust_records()
                .map(|r| (r.node_id, r.trust))
                .collect(),
            allocations_by_provider: BTreeMap::new(),
            allocation_share: BTreeMap::new(),
            verified: 0,
            rectified: 0,
            discarded: 0,
            service_failed: 0,
        };
        for (_, r) in trace.records() {
            match r {
                TraceRecord::Allocation { chosen, .. } => {
                    *s.allocations_by_provider.entry(*chosen).or_default() += 1
                }
                TraceRecord::Verdict { verdict, .. } => match verdict {
                    VerdictKind::Verified => s.verified += 1,
                    VerdictKind::Rectified => s.rectified += 1,
                },
                TraceRecord::Discarded { .. } => s.discarded += 1,
                TraceRecord::ServiceFailed { .. } => s.service_failed += 1,
                TraceRecord::End {
                    arrivals,
                    allocations,
                    rejected,
                    in_flight,
                } => {
                    s.arrivals = *arrivals;
                    s.allocations = *allocations;
                    s.rejected = *rejected;
                    s.in_flight = *in_flight;
                }
                _ => {}
            }
        }
        let total: u64 = s.allocations_by_provider.values().sum();
        if total > 0 {
            s.allocation_share = s
                .allocations_by_provider
                .iter()
                .map(|(&n, &k)| (n, k as f64 / total as f64))
                .collect();
        }
        s
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "seed {}\narrivals {}  allocations {}  rejected {}  in flight {}\nfeedback: {} verified, {} rectified, {} discarded, {} failed services\n\nnode  trust     allocations  share\n",
            self.seed,
            self.arrivals,
            self.allocations,
            self.rejected,
            self.in_flight,
            self.verified,
            self.rectified,
            self.discarded,
            self.service_failed
        );
        for (node, trust) in &self.final_trust {
            let k = self.allocations_by_provider.get(node).copied().unwrap_or(0);
            let share = self.allocation_share.get(node).copied().unwrap_or(0.0);
            out.push_str(&format!(
                "{:<5} {:<9.6} {:<12} {:.4}\n",
                node.0, trust, k, share
            ));
        }
        out
    }
}

/// Runs a scenario start to finish.
pub fn run(scenario: &Scenario) -> Result<SimOutput, SimError> {
    Engine::new(scenario)?.finish()
}
