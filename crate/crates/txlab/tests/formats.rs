use std::io::Cursor;

use txlab::cli::judge;
use txlab::formats::*;
use txlab_core::history::{AnsiLevel, Anomaly};
use txlab_core::replication::{run_replication, scaling_sweep, ReplicationConfig, Strategy, SweepAxis};
use txlab_core::scenario::{run_scenario, Artifact};
use txlab_core::sim::{Decision, Pid};
use txlab_core::store::Store;

const WRITE_SKEW: &str = include_str!("data/write_skew.jsonl");

fn artifact(scenario: &str, stem: &str) -> Artifact {
    let report = run_scenario(scenario).unwrap();
    report.artifacts.into_iter().find(|(s, _)| s == stem).unwrap_or_else(|| panic!("{scenario} has no {stem}")).1
}

fn bytes(f: impl FnOnce(&mut Vec<u8>)) -> Vec<u8> {
    let mut out = Vec::new();
    f(&mut out);
    out
}

#[test]
fn write_skew_history_matches_the_golden_file() {
    let Artifact::History(h) = artifact("write-skew", "history") else { panic!("not a history") };
    let out = bytes(|w| write_history(w, &h).unwrap());
    assert_eq!(String::from_utf8(out).unwrap(), WRITE_SKEW);
    let parsed = read_history(WRITE_SKEW.as_bytes()).unwrap();
    assert_eq!(parsed, h);
    let verdict = judge(&parsed).unwrap();
    assert!(!verdict.serializable);
    assert_eq!(verdict.ansi_level, AnsiLevel::AnsiSerializable);
    assert_eq!(verdict.anomalies, [Anomaly::WriteSkew]);
}

#[test]
fn every_history_artifact_round_trips() {
    for name in txlab_core::scenario::SCENARIOS {
        for (stem, a) in run_scenario(name).unwrap().artifacts {
            if let Artifact::History(h) = a {
                let out = bytes(|w| write_history(w, &h).unwrap());
                assert_eq!(read_history(out.as_slice()).unwrap(), h, "{name}/{stem}");
            }
        }
    }
}

#[test]
fn log_round_trip_rebuilds_the_store() {
    let Artifact::Log(log) = artifact("saga-compensation", "log") else { panic!("not a log") };
    let out = bytes(|w| write_log(w, &log).unwrap());
    let parsed = read_log(out.as_slice()).unwrap();
    assert_eq!(parsed, log);
    let mut rebuilt = Store::from_log(parsed);
    let mut original = Store::from_log(log);
    assert_eq!(rebuilt.recover(), original.recover());
}

#[test]
fn lock_trace_round_trips() {
    for stem in ["record-locks", "predicate-locks"] {
        let Artifact::LockTrace(trace) = artifact("napa-phantom", stem) else { panic!("not a lock trace") };
        assert!(!trace.is_empty());
        let out = bytes(|w| write_lock_trace(w, &trace).unwrap());
        assert_eq!(read_lock_trace(out.as_slice()).unwrap(), trace, "{stem}");
    }
}

#[test]
fn versions_round_trip() {
    let Artifact::Versions(v) = artifact("write-skew", "versions") else { panic!("not versions") };
    let out = bytes(|w| write_versions(w, &v).unwrap());
    assert_eq!(read_versions(out.as_slice()).unwrap(), v);
}

#[test]
fn commit_trace_round_trips_with_decisions_last() {
    let Artifact::Commit(outcome) = artifact("2pc-blocking", "clean") else { panic!("not a commit run") };
    let lines = commit_trace(&outcome, txlab_core::TxnId(7));
    let out = bytes(|w| write_commit_trace(w, &outcome, txlab_core::TxnId(7)).unwrap());
    let parsed = read_commit_trace(out.as_slice()).unwrap();
    assert_eq!(parsed, lines);
    let first_decision = parsed.iter().position(|l| matches!(l, CommitTraceLine::Decision { .. })).unwrap();
    assert!(parsed[first_decision..].iter().all(|l| matches!(l, CommitTraceLine::Decision { .. })));
    assert!(parsed.iter().any(|l| matches!(l, CommitTraceLine::Decision { process: Pid::Rm(_), decision: Some(Decision::Commit) })));
    assert!(parsed.iter().all(|l| !matches!(l, CommitTraceLine::Message { txn, .. } if txn.0 != 7)));
}

#[test]
fn fault_schedule_parses_with_defaults() {
    let faults = read_faults(r#"{"crashes":[{"process":"tm0","atTick":2}]}"#.as_bytes()).unwrap();
    assert_eq!(faults.crashes.len(), 1);
    assert_eq!(faults.crashes[0].at_tick, 2);
    assert!(faults.drops.is_empty() && faults.recoveries.is_empty());
    assert!(read_faults("{}".as_bytes()).unwrap().is_empty());
}

#[test]
fn metrics_round_trip() {
    let cfgs: Vec<ReplicationConfig> = Strategy::ALL
        .into_iter()
        .map(|strategy| ReplicationConfig { strategy, nodes: 3, duration: 2_000, ..Default::default() })
        .collect();
    let rows: Vec<MetricsRow> = cfgs.iter().map(|c| MetricsRow::new(c, &run_replication(c).unwrap().metrics)).collect();
    let out = bytes(|w| write_metrics(w, &rows).unwrap());
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next(), Some(METRICS_HEADER));
    assert_eq!(read_metrics(text.as_bytes()).unwrap(), rows);
}

#[test]
fn metrics_errors_name_the_line() {
    let text = format!("{METRICS_HEADER}\neager-everywhere,2,0.1,4,100,0,1,0,0,10\nbogus,2,0.1,4,100,0,1,0,0,10\n");
    let err = read_metrics(text.as_bytes()).unwrap_err();
    assert!(matches!(err, FormatError::Parse(ParseError { line: 3, .. })), "{err}");
}

#[test]
fn slopes_round_trip() {
    let base = ReplicationConfig { nodes: 2, duration: 2_000, ..Default::default() };
    let (sweep, _) = scaling_sweep(&base, SweepAxis::Nodes, &[2.0, 4.0, 8.0], &[0]).unwrap();
    let out = bytes(|w| write_slopes(w, std::slice::from_ref(&sweep)).unwrap());
    let parsed = read_slopes(out.as_slice()).unwrap();
    assert_eq!(parsed.len(), 1);
    assert_eq!(parsed[0].strategy, sweep.strategy);
    assert_eq!(parsed[0].points.len(), sweep.points.len());
    let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() < 1e-12,
        (a, b) => a.is_none() && b.is_none(),
    };
    assert!(close(parsed[0].work_slope, sweep.work_slope));
    assert!(close(parsed[0].deadlock_slope, sweep.deadlock_slope));
}

#[test]
fn saga_file_parses() {
    let text = r#"{
        "initial": {"acct/a": 100},
        "steps": [
            {"name": "debit", "forward": [{"op": "add", "key": "acct/a", "delta": -10}],
             "compensation": [{"op": "add", "key": "acct/a", "delta": 10}]},
            {"name": "notify", "forward": [{"op": "add", "key": "acct/b", "delta": 1}]}
        ]
    }"#;
    let saga = read_saga(text.as_bytes()).unwrap();
    assert_eq!(saga.initial.len(), 1);
    assert_eq!(saga.steps.len(), 2);
    assert!(saga.steps[1].compensation.is_none());
}

#[test]
fn history_errors_name_the_line() {
    let mut text = WRITE_SKEW.lines().take(3).collect::<Vec<_>>().join("\n");
    text.push_str("\n{\"seq\":4,\"txn\":0,\"kind\":\"teleport\"}\n");
    let err = read_history(Cursor::new(text)).unwrap_err();
    assert!(matches!(err, FormatError::Parse(ParseError { line: 4, .. })), "{err}");
}
