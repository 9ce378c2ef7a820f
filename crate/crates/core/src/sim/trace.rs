//! Metrics trace: everything the engine did, as versioned JSON lines, a
//! human-readable log and a per-update CSV table.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{MembershipChange, TerminationReason};
use crate::feedback_eval::DiscardReason;
use crate::model::{NodeId, QosVector, RequestClass, SimTime};
use crate::trust_eval::{SweepUpdate, TrustComponents};
use crate::upper_level::{JoinVerdict, Receipt, Refusal};

pub const TRACE_SCHEMA: &str = "gridtrust-trace";
pub const TRACE_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "time,node,S,RE,SD,TV,T_new,n";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace is empty")]
    Empty,
    #[error("not a trace file (header schema `{0}`)")]
    Schema(String),
    #[error("trace version {found} is not supported (expected {TRACE_VERSION})")]
    Version { found: u32 },
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub version: u32,
    pub seed: u64,
    pub duration: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Verified,
    Rectified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinStatus {
    Joined,
    Refused,
    /// No live GRM; retried after failover.
    Deferred,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TraceRecord {
    Arrival {
        request: u64,
        client: String,
        domain: String,
    },
    /// The domain's manager is down; the item waits for failover.
    Parked {
        domain: String,
        what: String,
    },
    Redispatched {
        domain: String,
        dtm: NodeId,
        items: usize,
    },
    Selection {
        domain: String,
        providers: Vec<NodeId>,
        tv: Vec<f64>,
        sp: Vec<f64>,
    },
    Allocation {
        request: u64,
        client: String,
        domain: String,
        tx: u64,
        providers: Vec<NodeId>,
        dtv: Vec<f64>,
        candidates: Vec<NodeId>,
        slice: Vec<f64>,
        chosen: NodeId,
    },
    Rejected {
        request: u64,
        reason: String,
    },
    Terminated {
        class: RequestClass,
        domain: String,
        reason: TerminationReason,
    },
    ServiceFailed {
        tx: u64,
        provider: NodeId,
    },
    Discarded {
        tx: u64,
        provider: NodeId,
        reason: DiscardReason,
    },
    Verdict {
        tx: u64,
        provider: NodeId,
        client: String,
        verdict: VerdictKind,
        original: QosVector,
        ratings: QosVector,
    },
    TrustUpdate {
        domain: String,
        #[serde(flatten)]
        c: TrustComponents,
    },
    Sweep {
        domain: String,
        sd: f64,
        updates: Vec<SweepUpdate>,
    },
    Membership {
        change: MembershipChange,
    },
    Crash {
        node: NodeId,
    },
    Recover {
        node: NodeId,
    },
    Join {
        domain: String,
        status: JoinStatus,
        verdict: Option<JoinVerdict>,
        refusal: Option<Refusal>,
    },
    Propagation {
        domain: String,
        receipts: Vec<Receipt>,
    },
    SecurityUpdate {
        domain: String,
        sa: QosVector,
        df: f64,
    },
    Heartbeat {
        up: usize,
    },
    End {
        arrivals: u64,
        allocations: u64,
        rejected: u64,
        in_flight: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub t: SimTime,
    #[serde(flatten)]
    pub record: TraceRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTrace {
    pub header: TraceHeader,
    pub lines: Vec<TraceLine>,
}

impl MetricsTrace {
    pub fn new(seed: u64, duration: f64) -> Self {
        Self {
            header: TraceHeader {
                schema: TRACE_SCHEMA.to_string(),
                version: TRACE_VERSION,
                seed,
                duration,
            },
            lines: Vec::new(),
        }
    }

    pub fn push(&mut self, t: SimTime, record: TraceRecord) {
        self.lines.push(TraceLine { t, record });
    }

    pub fn records(&self) -> impl Iterator<Item = (SimTime, &TraceRecord)> {
        self.lines.iter().map(|l| (l.t, &l.record))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serialises");
        out.push('\n');
        for line in &self.lines {
            out.push_str(&serde_json::to_string(line).expect("trace line serialises"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, TraceError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(TraceError::Empty)?;
        let raw: serde_json::Value = serde_json::from_str(first).map_err(|e| TraceError::Line {
            line: 1,
            reason: e.to_string(),
        })?;
        let schema = raw
            .get("schema")
            .and_then(|s| s.as_str())
            .unwrap_or_default();
        if schema != TRACE_SCHEMA {
            return Err(TraceError::Schema(schema.to_string()));
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != TRACE_VERSION {
            return Err(TraceError::Version { found: version });
        }
        let header: TraceHeader = serde_json::from_value(raw).map_err(|e| TraceError::Line {
            line: 1,
            reason: e.to_string(),
        })?;
        let lines = lines
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| TraceError::Line {
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { header, lines })
    }

    pub fn to_log(&self) -> String {
        let mut out = format!(
            "# {} v{} seed={} duration={}\n",
            self.header.schema, self.header.version, self.header.seed, self.header.duration
        );
        for l in &self.lines {
            let _ = writeln!(out, "{:>10.3}  {}", l.t, l.record);
        }
        out
    }

    /// One row per trust update.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for l in &self.lines {
            if let TraceRecord::TrustUpdate { c, .. } = &l.record {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    l.t, c.node, c.s, c.re, c.sd, c.tv, c.t_new, c.n
                );
            }
        }
        out
    }
}

fn list<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn nums(xs: &[f64]) -> String {
    xs.iter()
        .map(|x| format!("{x:.4}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceRecord::Arrival { request, client, domain } => {
                write!(f, "arrival      req {request} from {client} for {domain}")
            }
            TraceRecord::Parked { domain, what } => write!(f, "parked       {what} at {domain} (manager down)"),
            TraceRecord::Redispatched { domain, dtm, items } => {
                write!(f, "redispatch   {items} item(s) at {domain} to node {dtm}")
            }
            TraceRecord::Selection { domain, providers, sp, .. } => {
                write!(f, "selection    {domain} providers [{}] sp [{}]", list(providers), nums(sp))
            }
            TraceRecord::Allocation {
                request,
                tx,
                candidates,
                slice,
                chosen,
                ..
            } => write!(
                f,
                "allocation   req {request} tx {tx} -> node {chosen} (candidates [{}] slice [{}])",
                list(candidates),
                nums(slice)
            ),
            TraceRecord::Rejected { request, reason } => write!(f, "rejected     req {request}: {reason}"),
            TraceRecord::Terminated { class, domain, reason } => {
                write!(f, "terminated   {class:?} at {domain}: {reason:?}")
            }
            TraceRecord::ServiceFailed { tx, provider } => write!(f, "failed       tx {tx} at node {provider}"),
            TraceRecord::Discarded { tx, provider, reason } => {
                write!(f, "discarded    tx {tx} feedback for node {provider}: {reason:?}")
            }
            TraceRecord::Verdict {
                tx,
                provider,
                verdict,
                ratings,
                ..
            } => write!(f, "feedback     tx {tx} node {provider} {verdict:?} [{}]", nums(ratings)),
            TraceRecord::TrustUpdate { c, .. } => write!(
                f,
                "trust        node {} S={:.4} RE={:.4} SD={:.4} TV={:.4} T {:.4} -> {:.4} n={}",
                c.node, c.s, c.re, c.sd, c.tv, c.t_old, c.t_new, c.n
            ),
            TraceRecord::Sweep { domain, sd, updates } => {
                write!(f, "sweep        {domain} SD={sd:.4} decayed {}", updates.len())
            }
            TraceRecord::Membership { change } => write!(f, "membership   {change:?}"),
            TraceRecord::Crash { node } => write!(f, "crash        node {node}"),
            TraceRecord::Recover { node } => write!(f, "recover      node {node}"),
            TraceRecord::Join { domain, status, .. } => write!(f, "join         {domain}: {status:?}"),
            TraceRecord::Propagation { domain, receipts } => {
                write!(f, "propagation  {domain} to {} manager(s)", receipts.len())
            }
            TraceRecord::SecurityUpdate { domain, df, .. } => {
                write!(f, "security     {domain} DF={df:.4} (applies at next sweep)")
            }
            TraceRecord::Heartbeat { up } => write!(f, "heartbeat    {up} node(s) up"),
            TraceRecord::End {
                arrivals,
                allocations,
                rejected,
                in_flight,
            } => write!(
                f,
                "end          arrivals {arrivals} allocations {allocations} rejected {rejected} in flight {in_flight}"
            ),
        }
    }
}
