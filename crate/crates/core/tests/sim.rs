use std::collections::BTreeSet;
use std::path::PathBuf;

use gridtrust::sim::{run, Engine, Scenario, ScenarioError, SimError, TraceRecord};
use gridtrust::NodeId;

fn fixture(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Scenario::from_toml(&text, &[]).unwrap()
}

#[test]
fn quiet_grid_only_keeps_time() {
    let out = run(&fixture("quiet.toml")).unwrap();
    for (_, r) in out.trace.records() {
        assert!(
            matches!(
                r,
                TraceRecord::Heartbeat { .. }
                    | TraceRecord::Sweep { .. }
                    | TraceRecord::Membership { .. }
                    | TraceRecord::End { .. }
            ),
            "{r:?}"
        );
    }
    assert!(out.summary.final_trust.values().all(|&t| t == 0.5));
}

#[test]
fn same_seed_gives_identical_bytes() {
    let sc = fixture("mixed.toml");
    let a = run(&sc).unwrap();
    let b = run(&sc).unwrap();
    assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl());
    assert_eq!(a.store.journal.render(), b.store.journal.render());
}

#[test]
fn other_seed_changes_trace_not_schema() {
    let mut sc = fixture("mixed.toml");
    let a = run(&sc).unwrap().trace;
    sc.seed += 1;
    let b = run(&sc).unwrap().trace;
    assert_ne!(a.to_jsonl(), b.to_jsonl());
    let kinds = |t: &gridtrust::sim::MetricsTrace| -> BTreeSet<String> {
        t.records()
            .map(|(_, r)| {
                serde_json::to_value(r).unwrap()["kind"]
                    .as_str()
                    .unwrap()
                    .to_string()
            })
            .collect()
    };
    assert_eq!(
        kinds(&a).contains("allocation"),
        kinds(&b).contains("allocation")
    );
    assert_eq!(a.header.version, b.header.version);
}

#[test]
fn nothing_runs_after_duration_and_time_never_goes_back() {
    for name in ["mixed.toml", "failover.toml", "join.toml"] {
        let sc = fixture(name);
        let out = run(&sc).unwrap();
        let times: Vec<f64> = out.trace.records().map(|(t, _)| t).collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]), "{name}");
        assert!(times.iter().all(|&t| t <= sc.duration), "{name}");
    }
}

/// Honest service at 0.9 vs malicious at 0.2, equal weights. Every composite
/// value of the honest provider is at least (0.85 + 0.5 + SD) / 3 (noise
/// floor, recommendation never below its neutral start) and every value of
/// the malicious one at most (0.25 + 0.5 + SD) / 3, and the decayed update
/// stays within the range of the values it blends.
#[test]
fn honest_provider_ends_above_malicious_within_fixed_point_bounds() {
    let sc = fixture("separation.toml");
    let out = run(&sc).unwrap();
    let sd = [0.7, 0.5, 0.8, 0.5, 1.0, 0.0].iter().sum::<f64>() / 6.0;
    let honest = out.summary.final_trust[&NodeId(4)];
    let malicious = out.summary.final_trust[&NodeId(5)];
    let lo_h = (0.85 + 0.5 + sd) / 3.0;
    let hi_h = (0.95 + 1.0 + sd) / 3.0;
    let lo_m = (0.15 + sd) / 3.0;
    let hi_m = (0.25 + 0.5 + sd) / 3.0;
    assert!(honest >= lo_h - 1e-12 && honest <= hi_h + 1e-12, "{honest}");
    assert!(
        malicious >= lo_m - 1e-12 && malicious <= hi_m + 1e-12,
        "{malicious}"
    );
    assert!(honest > malicious);
}

#[test]
fn manager_crash_loses_no_request() {
    let out = run(&fixture("failover.toml")).unwrap();
    let mut arrived = BTreeSet::new();
    let mut settled = BTreeSet::new();
    let mut parked = 0;
    for (_, r) in out.trace.records() {
        match r {
            TraceRecord::Arrival { request, .. } => {
                arrived.insert(*request);
            }
            TraceRecord::Allocation { request, .. } | TraceRecord::Rejected { request, .. } => {
                assert!(settled.insert(*request), "request {request} settled twice");
            }
            TraceRecord::Parked { .. } => parked += 1,
            _ => {}
        }
    }
    assert!(parked > 0, "the crash should have parked work");
    let s = &out.summary;
    assert_eq!(s.arrivals, arrived.len() as u64);
    assert_eq!(s.arrivals, s.allocations + s.rejected + s.in_flight);
    assert_eq!(arrived.difference(&settled).count() as u64, s.in_flight);
}

#[test]
fn stepping_matches_a_full_run() {
    let sc = fixture("join.toml");
    let mut engine = Engine::new(&sc).unwrap();
    engine.run_until(39.0).unwrap();
    assert!(engine.now() <= 39.0);
    let stepped = engine.finish().unwrap();
    assert_eq!(stepped.trace.to_jsonl(), run(&sc).unwrap().trace.to_jsonl());
}

#[test]
fn invalid_scenario_is_refused_before_running() {
    let mut sc = fixture("quiet.toml");
    sc.trust.alpha = 0.9;
    sc.duration = 0.0;
    match run(&sc) {
        Err(SimError::Scenario(ScenarioError::Invalid(v))) => assert_eq!(v.len(), 2, "{v:?}"),
        other => panic!("{:?}", other.map(|o| o.summary)),
    }
}

#[test]
fn inter_domain_security_update_is_terminated() {
    let out = run(&fixture("mixed.toml")).unwrap();
    let terminated = out
        .trace
        .records()
        .filter(|(_, r)| matches!(r, TraceRecord::Terminated { domain, .. } if domain == "archive"))
        .count();
    let applied: Vec<&str> = out
        .trace
        .records()
        .filter_map(|(_, r)| match r {
            TraceRecord::SecurityUpdate { domain, .. } => Some(domain.as_str()),
            _ => None,
        })
        .collect();
    assert_eq!(terminated, 1);
    assert_eq!(applied, vec!["cluster"]);
}

#[test]
fn security_update_reaches_self_defense_at_next_sweep() {
    let out = run(&fixture("mixed.toml")).unwrap();
    let sweeps: Vec<(f64, f64)> = out
        .trace
        .records()
        .filter_map(|(t, r)| match r {
            TraceRecord::Sweep { domain, sd, .. } if domain == "cluster" => Some((t, *sd)),
            _ => None,
        })
        .collect();
    assert!(sweeps
        .iter()
        .filter(|(t, _)| *t < 100.0)
        .all(|(_, sd)| (sd - 0.5833333333333334).abs() < 1e-12));
    assert!(sweeps
        .iter()
        .filter(|(t, _)| *t >= 100.0)
        .all(|(_, sd)| (sd - 0.2).abs() < 1e-12));
}

#[test]
fn crashed_provider_services_fail_without_feedback() {
    let out = run(&fixture("mixed.toml")).unwrap();
    let failed: BTreeSet<u64> = out
        .trace
        .records()
        .filter_map(|(_, r)| match r {
            TraceRecord::ServiceFailed { tx, .. } => Some(*tx),
            _ => None,
        })
        .collect();
    assert!(!failed.is_empty());
    for (_, r) in out.trace.records() {
        if let TraceRecord::Verdict { tx, .. } = r {
            assert!(!failed.contains(tx));
        }
    }
}
