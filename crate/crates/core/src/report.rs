//! Aggregates computed from a metrics trace alone: trust trajectories,
//! allocation shares per time window and feedback verdict counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{NodeId, SimTime};
use crate::sim::{MetricsTrace, TraceRecord, VerdictKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: SimTime,
    pub end: SimTime,
    pub allocations: BTreeMap<NodeId, u64>,
    /// Empty when the window saw no allocation.
    pub shares: BTreeMap<NodeId, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub verified: u64,
    pub rectified: u64,
    pub discarded: BTreeMap<String, u64>,
    pub service_failed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub duration: f64,
    /// `(time, trust)` after every transaction update and sweep, per node.
    pub trajectories: BTreeMap<NodeId, Vec<(SimTime, f64)>>,
    pub windows: Vec<Window>,
    pub verdicts: VerdictCounts,
}

/// Builds the report over `windows` equal slices of `[0, duration]`.
pub fn build_report(trace: &MetricsTrace, windows: usize) -> Report {
    let windows = windows.max(1);
    let duration = trace.header.duration;
    let width = duration / windows as f64;
    let mut slots: Vec<Window> = (0..windows)
        .map(|i| Window {
            start: i as f64 * width,
            end: if i + 1 == windows {
                duration
            } else {
                (i + 1) as f64 * width
            },
            allocations: BTreeMap::new(),
            shares: BTreeMap::new(),
        })
        .collect();
    let mut trajectories: BTreeMap<NodeId, Vec<(SimTime, f64)>> = BTreeMap::new();
    let mut verdicts = VerdictCounts::default();
    for (t, r) in trace.records() {
        match r {
            TraceRecord::TrustUpdate { c, .. } => {
                trajectories.entry(c.node).or_default().push((t, c.t_new))
            }
            TraceRecord::Sweep { updates, .. } => {
                for u in updates {
                    trajectories.entry(u.node).or_default().push((t, u.t_new));
                }
            }
            TraceRecord::Allocation { chosen, .. } => {
                let i = if width > 0.0 {
                    ((t / width) as usize).min(windows - 1)
                } else {
                    0
                };
                *slots[i].allocations.entry(*chosen).or_default() += 1;
            }
            TraceRecord::Verdict { verdict, .. } => match verdict {
                VerdictKind::Verified => verdicts.verified += 1,
                VerdictKind::Rectified => verdicts.rectified += 1,
            },
            TraceRecord::Discarded { reason, .. } => {
                *verdicts.discarded.entry(format!("{reason:?}")).or_default() += 1;
            }
            TraceRecord::ServiceFailed { .. } => verdicts.service_failed += 1,
            _ => {}
        }
    }
    for w in &mut slots {
        let total: u64 = w.allocations.values().sum();
        if total > 0 {
            w.shares = w
                .allocations
                .iter()
                .map(|(&n, &k)| (n, k as f64 / total as f64))
                .collect();
        }
    }
    Report {
        seed: trace.header.seed,
        duration,
        trajectories,
        windows: slots,
        verdicts,
    }
}

impl Report {
    pub fn render(&self) -> String {
        let mut out = format!(
            "seed {}  duration {}\n\ntrust trajectories\n",
            self.seed, self.duration
        );
        let _ = writeln!(
            out,
            "{:<6} {:>8} {:>10} {:>10} {:>10} {:>10}",
            "node", "updates", "first", "min", "max", "last"
        );
        for (node, points) in &self.trajectories {
            let values = points.iter().map(|p| p.1);
            let min = values.clone().fold(f64::INFINITY, f64::min);
            let max = values.fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(
                out,
                "{:<6} {:>8} {:>10.6} {:>10.6} {:>10.6} {:>10.6}",
                node.0,
                points.len(),
                points[0].1,
                min,
                max,
                points[points.len() - 1].1
            );
        }

        let providers: Vec<NodeId> = {
            let mut p: Vec<NodeId> = self
                .windows
                .iter()
                .flat_map(|w| w.allocations.keys().copied())
                .collect();
            p.sort_unstable();
            p.dedup();
            p
        };
        out.push_str("\nallocation share per window\n");
        let _ = write!(out, "{:>9} {:>9}", "start", "end");
        for p in &providers {
            let _ = write!(out, " {:>8}", format!("node {}", p.0));
        }
        out.push('\n');
        for w in &self.windows {
            let _ = write!(out, "{:>9.2} {:>9.2}", w.start, w.end);
            for p in &providers {
                match w.shares.get(p) {
                    Some(s) => {
                        let _ = write!(out, " {s:>8.4}");
                    }
                    None if w.shares.is_empty() => {
                        let _ = write!(out, " {:>8}", "-");
                    }
                    None => {
                        let _ = write!(out, " {:>8.4}", 0.0);
                    }
                }
            }
            out.push('\n');
        }

        let v = &self.verdicts;
        let _ = write!(
            out,
            "\nfeedback verdicts\nverified {}\nrectified {}\nservice failed {}\n",
            v.verified, v.rectified, v.service_failed
        );
        for (reason, k) in &v.discarded {
            let _ = writeln!(out, "discarded ({reason}) {k}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alloc(t: f64, chosen: u32) -> (f64, TraceRecord) {
        (
            t,
            TraceRecord::Allocation {
                request: 0,
                client: "c".into(),
                domain: "d".into(),
                tx: 0,
                providers: vec![],
                dtv: vec![],
                candidates: vec![NodeId(chosen)],
                slice: vec![1.0],
                chosen: NodeId(chosen),
            },
        )
    }

    #[test]
    fn single_provider_owns_every_window() {
        let mut trace = MetricsTrace::new(1, 10.0);
        for i in 0..10 {
            let (t, r) = alloc(i as f64 + 0.5, 4);
            trace.push(t, r);
        }
        let r = build_report(&trace, 5);
        assert_eq!(r.windows.len(), 5);
        for w in &r.windows {
            assert_eq!(w.shares[&NodeId(4)], 1.0);
        }
    }

    #[test]
    fn shares_sum_to_one_and_allocation_at_end_lands_in_last_window() {
        let mut trace = MetricsTrace::new(1, 10.0);
        for (t, n) in [(0.0, 1), (1.0, 2), (2.0, 2), (10.0, 3)] {
            let (t, r) = alloc(t, n);
            trace.push(t, r);
        }
        let r = build_report(&trace, 2);
        assert_eq!(r.windows[1].allocations[&NodeId(3)], 1);
        for w in r.windows.iter().filter(|w| !w.shares.is_empty()) {
            assert!((w.shares.values().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(r.render().contains("allocation share per window"));
    }
}
