//! Named, self-checking scenarios.
//!
//! Each scenario encodes one effect as an explicit script (no hidden
//! randomness), runs it and evaluates its own assertions. A report carries one
//! line per assertion plus the artifacts the run produced, which the CLI
//! writes out in their file formats.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::commit::{run_2pc, run_3pc_backup, run_paxos_commit, spontaneous_prepare, Outcome, Variant, Vote};
use crate::engine::{Engine, LockingEngine, Observed, Op, PhantomMode, SnapshotEngine};
use crate::history::{classify_ansi_level, detect_anomalies, is_serializable, AnsiLevel, Anomaly, History};
use crate::lock::{Degree, Interval, LockEvent, LockEventKind, Predicate};
use crate::mvcc::Version;
use crate::replication::{
    eager_deadlock_demo, exact, lazy_inconsistency_demo, DeliveryOrder, MobileTxn, NodeState, Program, ReplicaWrite, TwoTier,
    TxnResult,
};
use crate::saga::{dependency_order_holds, itinerary, run_saga_failing_at, stock_itinerary, SagaOutcome, SagaRun};
use crate::sim::{Decision, FaultSchedule, MsgMatcher, Pid, SimConfig};
use crate::store::{LogRecord, Store};
use crate::types::{Key, Value};
use crate::workload::{explore_interleavings, run_script, Action};

pub const SCENARIOS: [&str; 14] = [
    "napa-phantom",
    "write-skew",
    "lost-update",
    "dirty-read-degrees",
    "2pc-blocking",
    "3pc-takeover",
    "paxos-commit-failover",
    "paxos-commit-trivial-F0",
    "spontaneous-prepare-hazard",
    "eager-deadlock",
    "lazy-inconsistency",
    "thomas-convergence",
    "two-tier-roundtrip",
    "saga-compensation",
];

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown scenario {0:?}")]
pub struct UnknownScenario(pub String);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Something a scenario produced, in the shape of its owning module.
#[derive(Clone, Debug)]
pub enum Artifact {
    History(History),
    LockTrace(Vec<LockEvent>),
    Versions(BTreeMap<Key, Vec<Version>>),
    Log(Vec<LogRecord>),
    Commit(Outcome),
    Saga(SagaRun),
}

#[derive(Clone, Debug)]
pub struct ScenarioReport {
    pub name: &'static str,
    pub checks: Vec<Check>,
    /// `(file stem, artifact)`.
    pub artifacts: Vec<(String, Artifact)>,
}

impl ScenarioReport {
    fn new(name: &'static str) -> Self {
        ScenarioReport { name, checks: Vec::new(), artifacts: Vec::new() }
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl ToString) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.to_string() });
    }

    fn artifact(&mut self, stem: &str, a: Artifact) {
        self.artifacts.push((stem.into(), a));
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}: {} ({})", if c.passed { "PASS" } else { "FAIL" }, self.name, c.name, c.detail)?;
        }
        Ok(())
    }
}

pub fn run_scenario(name: &str) -> Result<ScenarioReport, UnknownScenario> {
    let idx = SCENARIOS.iter().position(|s| *s == name).ok_or_else(|| UnknownScenario(name.into()))?;
    let name = SCENARIOS[idx];
    let mut r = ScenarioReport::new(name);
    match name {
        "napa-phantom" => napa_phantom(&mut r),
        "write-skew" => write_skew(&mut r),
        "lost-update" => lost_update(&mut r),
        "dirty-read-degrees" => dirty_read_degrees(&mut r),
        "2pc-blocking" => two_pc_blocking(&mut r),
        "3pc-takeover" => three_pc_takeover(&mut r),
        "paxos-commit-failover" => paxos_commit_failover(&mut r),
        "paxos-commit-trivial-F0" => paxos_commit_f0(&mut r),
        "spontaneous-prepare-hazard" => spontaneous_prepare_hazard(&mut r),
        "eager-deadlock" => eager_deadlock(&mut r),
        "lazy-inconsistency" => lazy_inconsistency(&mut r),
        "thomas-convergence" => thomas_convergence(&mut r),
        "two-tier-roundtrip" => two_tier_roundtrip(&mut r),
        _ => saga_compensation(&mut r),
    }
    Ok(r)
}

fn anomalies(h: &History) -> BTreeSet<Anomaly> {
    detect_anomalies(h)
}

fn serializable(h: &History) -> bool {
    is_serializable(h).unwrap_or(false)
}

fn ints(pairs: &[(&str, i64)]) -> BTreeMap<Key, Value> {
    pairs.iter().map(|(k, v)| (Key::from(*k), Value::Int(*v))).collect()
}

fn read(k: &str) -> Action {
    Action::Op(Op::Read(k.into()))
}

fn write(k: &str, v: i64) -> Action {
    Action::Op(Op::Write(k.into(), Value::Int(v)))
}

fn locking(degree: Degree, phantom: PhantomMode, rows: BTreeMap<Key, Value>) -> LockingEngine {
    let mut e = LockingEngine::new(degree, phantom);
    e.load(rows);
    e
}

// ---- napa-phantom

fn account(loc: &str, balance: i64) -> Value {
    Value::record([("Location", Value::from(loc)), ("Balance", Value::Int(balance))])
}

pub fn napa() -> Predicate {
    Predicate::all("Accounts", [("Location", Interval::exactly("Napa"))])
}

/// Two accounts and the stored Napa total they must match.
pub fn napa_rows() -> BTreeMap<Key, Value> {
    [
        ("Accounts/1".into(), account("Napa", 100)),
        ("Accounts/2".into(), account("Sonoma", 50)),
        ("Assets/Napa".into(), Value::Int(100)),
    ]
    .into()
}

/// The auditor sums Napa balances, reads the stored Napa total, then lists
/// the Napa accounts again for its report.
pub fn napa_auditor() -> Vec<Action> {
    vec![Action::Op(Op::Scan(napa())), read("Assets/Napa"), Action::Op(Op::Scan(napa())), Action::Commit]
}

/// The teller opens a Napa account and raises the stored total.
pub fn napa_teller() -> Vec<Action> {
    vec![
        Action::Op(Op::Insert("Accounts/3".into(), account("Napa", 30))),
        read("Assets/Napa"),
        write("Assets/Napa", 130),
        Action::Commit,
    ]
}

/// Whether the audit's sum matches the total it read; `None` if it did not finish.
pub fn audit_consistent(observed: &[Observed]) -> Option<bool> {
    let (Some(Observed::Rows(rows)), Some(Observed::Value(Some(Value::Int(total))))) = (observed.first(), observed.get(1))
    else {
        return None;
    };
    let sum: i64 = rows.values().filter_map(|r| r.field("Balance").and_then(Value::as_int)).sum();
    Some(sum == *total)
}

fn napa_phantom(r: &mut ScenarioReport) {
    let steps: Vec<(usize, Action)> = vec![
        (0, napa_auditor()[0].clone()),
        (1, napa_teller()[0].clone()),
        (1, napa_teller()[1].clone()),
        (1, napa_teller()[2].clone()),
        (1, Action::Commit),
        (0, napa_auditor()[1].clone()),
        (0, napa_auditor()[2].clone()),
        (0, Action::Commit),
    ];
    let rec = run_script(locking(Degree::D3, PhantomMode::RecordOnly, napa_rows()), 2, &steps);
    let h = rec.engine.history();
    r.check("record locks: audit mismatch", audit_consistent(&rec.observed[0]) == Some(false), format!("{:?}", rec.observed[0]));
    r.check("record locks: not serializable", !serializable(h), "conflict graph has a cycle");
    r.check("record locks: phantom detected", anomalies(h).contains(&Anomaly::Phantom), format!("{:?}", anomalies(h)));
    r.artifact("record-history", Artifact::History(h.clone()));
    r.artifact("record-locks", Artifact::LockTrace(rec.engine.locks().trace().to_vec()));

    let pred = run_script(locking(Degree::D3, PhantomMode::Predicate, napa_rows()), 2, &steps);
    let h = pred.engine.history();
    let teller = pred.txns[1];
    let insert_waited = pred.engine.locks().trace().iter().any(|e| e.txn == teller && e.kind == LockEventKind::Block);
    r.check("predicate locks: teller blocks", insert_waited, "insert queued behind the scan's predicate lock");
    r.check("predicate locks: audit consistent", audit_consistent(&pred.observed[0]) == Some(true), format!("{:?}", pred.observed[0]));
    r.check("predicate locks: serializable", serializable(h), "acyclic");
    r.artifact("predicate-history", Artifact::History(h.clone()));
    r.artifact("predicate-locks", Artifact::LockTrace(pred.engine.locks().trace().to_vec()));

    for (mode, label) in [(PhantomMode::Predicate, "predicate"), (PhantomMode::Hierarchy, "hierarchy")] {
        let (mut runs, mut bad) = (0, 0);
        explore_interleavings(locking(Degree::D3, mode, napa_rows()), &[napa_auditor(), napa_teller()], &mut |e, obs, done| {
            runs += 1;
            let audit_ok = !done[0] || audit_consistent(&obs[0]) == Some(true);
            if !audit_ok || !serializable(e.history()) {
                bad += 1;
            }
        });
        r.check(&format!("{label}: every interleaving consistent"), runs > 0 && bad == 0, format!("{runs} interleavings, {bad} bad"));
    }
    let (mut runs, mut mismatches) = (0, 0);
    explore_interleavings(locking(Degree::D3, PhantomMode::RecordOnly, napa_rows()), &[napa_auditor(), napa_teller()], &mut |_, obs, done| {
        runs += 1;
        if done[0] && audit_consistent(&obs[0]) == Some(false) {
            mismatches += 1;
        }
    });
    r.check("record locks: some interleaving mismatches", mismatches > 0, format!("{mismatches} of {runs}"));
}

// ---- write-skew

fn write_skew(r: &mut ScenarioReport) {
    let steps = vec![
        (0, read("x")),
        (0, read("y")),
        (1, read("x")),
        (1, read("y")),
        (0, write("x", -40)),
        (1, write("y", -40)),
        (0, Action::Commit),
        (1, Action::Commit),
    ];
    let mut e = SnapshotEngine::new();
    e.load(ints(&[("x", 50), ("y", 50)]));
    let run = run_script(e, 2, &steps);
    let h = run.engine.history();
    r.check("both commit", run.committed == [true, true], format!("{:?}", run.committed));
    let level = classify_ansi_level(h);
    r.check("ANSI level", level == AnsiLevel::AnsiSerializable, format!("{level:?}"));
    r.check("not serializable", !serializable(h), "rw cycle between the two");
    let found = anomalies(h);
    r.check("write skew detected", found == [Anomaly::WriteSkew].into(), format!("{found:?}"));
    let state = run.engine.committed_state();
    let sum = state["x"].as_int().unwrap_or(0) + state["y"].as_int().unwrap_or(0);
    r.check("constraint x + y >= 0 broken", sum < 0, format!("x + y = {sum}"));
    r.artifact("history", Artifact::History(h.clone()));
    r.artifact("versions", Artifact::Versions(run.engine.store().versions().clone()));
}

// ---- lost-update

fn lost_update_steps() -> Vec<(usize, Action)> {
    vec![(0, read("x")), (1, read("x")), (0, write("x", 110)), (1, write("x", 120)), (0, Action::Commit), (1, Action::Commit)]
}

fn lost_update(r: &mut ScenarioReport) {
    let mut e = SnapshotEngine::new();
    e.load(ints(&[("x", 100)]));
    let si = run_script(e, 2, &lost_update_steps());
    r.check("snapshot: first committer wins", si.committed == [true, false], format!("{:?}", si.committed));
    r.check("snapshot: value kept", si.engine.committed_state()["x"] == Value::Int(110), format!("{:?}", si.engine.committed_state()));
    let lost = anomalies(si.engine.history()).contains(&Anomaly::LostUpdate);
    r.check("snapshot: no lost update", !lost, format!("lost update {}", if lost { "present" } else { "absent" }));
    r.artifact("snapshot-history", Artifact::History(si.engine.history().clone()));
    r.artifact("snapshot-versions", Artifact::Versions(si.engine.store().versions().clone()));

    let d2 = run_script(locking(Degree::D2, PhantomMode::RecordOnly, ints(&[("x", 100)])), 2, &lost_update_steps());
    let found = anomalies(d2.engine.history());
    r.check("degree 2: update lost", d2.committed == [true, true] && found.contains(&Anomaly::LostUpdate), format!("{found:?}"));
    r.artifact("d2-history", Artifact::History(d2.engine.history().clone()));

    let d3 = run_script(locking(Degree::D3, PhantomMode::RecordOnly, ints(&[("x", 100)])), 2, &lost_update_steps());
    r.check(
        "degree 3: deadlock aborts one",
        d3.deadlock_victims.len() == 1 && d3.committed.iter().filter(|c| **c).count() == 1,
        format!("victims {:?}", d3.deadlock_victims),
    );
    r.check("degree 3: serializable", serializable(d3.engine.history()), "acyclic");
    r.artifact("d3-locks", Artifact::LockTrace(d3.engine.locks().trace().to_vec()));
}

// ---- dirty-read-degrees

fn dirty_read_degrees(r: &mut ScenarioReport) {
    // writer updates x and aborts; reader reads x in between
    let dirty = vec![(0, write("x", 1)), (1, read("x")), (0, Action::Abort), (1, Action::Commit)];
    // reader reads x twice around a committed update
    let unrepeatable = vec![(0, read("x")), (1, write("x", 1)), (1, Action::Commit), (0, read("x")), (0, Action::Commit)];
    let expect = [
        (Degree::D1, true, true),
        (Degree::D2, false, true),
        (Degree::D3, false, false),
    ];
    for (degree, dirty_expected, nrr_expected) in expect {
        let a = run_script(locking(degree, PhantomMode::RecordOnly, ints(&[("x", 0)])), 2, &dirty);
        let got = anomalies(a.engine.history()).contains(&Anomaly::DirtyRead);
        r.check(&format!("{degree:?} dirty read {}", if dirty_expected { "admitted" } else { "prevented" }), got == dirty_expected, format!("reader saw {:?}", a.observed[1]));
        let b = run_script(locking(degree, PhantomMode::RecordOnly, ints(&[("x", 0)])), 2, &unrepeatable);
        let got = anomalies(b.engine.history()).contains(&Anomaly::NonRepeatableRead);
        r.check(&format!("{degree:?} non-repeatable read {}", if nrr_expected { "admitted" } else { "prevented" }), got == nrr_expected, format!("reads {:?}", b.observed[0]));
        r.artifact(&format!("{degree:?}-dirty-history").to_lowercase(), Artifact::History(a.engine.history().clone()));
        r.artifact(&format!("{degree:?}-reread-history").to_lowercase(), Artifact::History(b.engine.history().clone()));
    }
}

// ---- commit protocols

fn with(faults: FaultSchedule) -> SimConfig {
    SimConfig { faults, ..Default::default() }
}

fn two_pc_blocking(r: &mut ScenarioReport) {
    let votes = [Vote::Prepared; 3];
    let clean = run_2pc(&votes, SimConfig::default()).expect("valid");
    r.check("failure-free commit", clean.rm_decision() == Some(Decision::Commit), format!("{:?}", clean.decisions));
    r.check("three message delays", clean.delays == Some(3), format!("{:?}", clean.delays));
    r.check("3N messages", clean.messages == 9, clean.messages);
    let crash = run_2pc(&votes, with(FaultSchedule::default().crash_on_send(Pid::Tm(0), "COMMIT"))).expect("valid");
    r.check("TM crash blocks every RM", crash.blocked.len() == 3, format!("{:?}", crash.blocked));
    r.check("no disagreement", crash.agreement() && crash.stable(), "agreement holds");
    let recovered =
        run_2pc(&votes, with(FaultSchedule::default().crash_on_send(Pid::Tm(0), "COMMIT").recover(Pid::Tm(0), 40))).expect("valid");
    r.check("TM recovery unblocks", recovered.blocked.is_empty() && recovered.rm_decision() == Some(Decision::Commit), format!("{:?}", recovered.decisions));
    r.artifact("clean", Artifact::Commit(clean));
    r.artifact("blocked", Artifact::Commit(crash));
    r.artifact("recovered", Artifact::Commit(recovered));
}

fn three_pc_takeover(r: &mut ScenarioReport) {
    let votes = [Vote::Prepared; 2];
    let clean = run_3pc_backup(&votes, 1, false, SimConfig::default()).expect("valid");
    r.check("two extra delays", clean.delays == Some(5), format!("{:?}", clean.delays));
    let takeover =
        run_3pc_backup(&votes, 1, false, with(FaultSchedule::default().crash_on_send(Pid::Tm(0), "COMMIT").lead(Pid::Tm(1), 30))).expect("valid");
    r.check("backup finishes after primary crash", takeover.blocked.is_empty() && takeover.rm_decision() == Some(Decision::Commit), format!("{:?}", takeover.decisions));
    let slow = MsgMatcher { from: Some(Pid::Tm(0)), msg_type: Some("DECISION".into()), ..Default::default() };
    let faults = FaultSchedule::default().delay(slow, 20).lead(Pid::Tm(1), 6);
    let naive = run_3pc_backup(&votes, 1, true, with(faults.clone())).expect("valid");
    r.check("naive takeover contradicts a slow primary", !naive.agreement(), format!("{:?}", naive.decisions));
    let safe = run_3pc_backup(&votes, 1, false, with(faults)).expect("valid");
    r.check("safe takeover agrees", safe.agreement() && safe.rm_decision() == Some(Decision::Commit), format!("{:?}", safe.decisions));
    r.artifact("clean", Artifact::Commit(clean));
    r.artifact("takeover", Artifact::Commit(takeover));
    r.artifact("naive", Artifact::Commit(naive));
    r.artifact("safe", Artifact::Commit(safe));
}

fn paxos_commit_failover(r: &mut ScenarioReport) {
    let votes = [Vote::Prepared; 2];
    let clean = run_paxos_commit(&votes, 1, 3, Variant::Classic, SimConfig::default()).expect("valid");
    r.check("four delays", clean.delays == Some(4), format!("{:?}", clean.delays));
    r.check("five delays from the client", clean.delays_with_initiation == Some(5), format!("{:?}", clean.delays_with_initiation));
    let faults = FaultSchedule::default().crash_on_send(Pid::Tm(0), "COMMIT").lead(Pid::Tm(1), 20);
    let failover = run_paxos_commit(&votes, 1, 3, Variant::Classic, with(faults)).expect("valid");
    r.check("standby leader commits", failover.rm_decision() == Some(Decision::Commit) && failover.blocked.is_empty(), format!("{:?}", failover.decisions));
    r.check("agreement", failover.agreement() && failover.stable(), "all decided alike");
    let acc = run_paxos_commit(&votes, 1, 3, Variant::Classic, with(FaultSchedule::default().crash(Pid::Acceptor(0), 2))).expect("valid");
    r.check("one acceptor crash tolerated", acc.rm_decision() == Some(Decision::Commit) && acc.blocked.is_empty(), format!("{:?}", acc.decisions));
    let missing = run_paxos_commit(&votes, 1, 3, Variant::Classic, with(FaultSchedule::default().crash(Pid::Rm(1), 0).lead(Pid::Tm(1), 20))).expect("valid");
    r.check("missing vote aborts", missing.decisions[&Pid::Rm(0)] == Some(Decision::Abort) && missing.agreement(), format!("{:?}", missing.decisions));
    let bcast = run_paxos_commit(&votes, 1, 3, Variant::AcceptorBroadcast, SimConfig::default()).expect("valid");
    r.check("acceptor broadcast saves a delay", bcast.delays == Some(3), format!("{:?}", bcast.delays));
    r.artifact("clean", Artifact::Commit(clean));
    r.artifact("failover", Artifact::Commit(failover));
    r.artifact("acceptor-crash", Artifact::Commit(acc));
    r.artifact("broadcast", Artifact::Commit(bcast));
}

fn paxos_commit_f0(r: &mut ScenarioReport) {
    let votes = [Vote::Prepared; 3];
    let pc = run_paxos_commit(&votes, 0, 1, Variant::Classic, SimConfig::default()).expect("valid");
    let tpc = run_2pc(&votes, SimConfig::default()).expect("valid");
    r.check("same delays as 2PC", pc.delays == tpc.delays, format!("{:?} vs {:?}", pc.delays, tpc.delays));
    r.check("same messages as 2PC", pc.messages == tpc.messages, format!("{} vs {}", pc.messages, tpc.messages));
    let crash = || with(FaultSchedule::default().crash_on_send(Pid::Tm(0), "COMMIT"));
    let pc_crash = run_paxos_commit(&votes, 0, 1, Variant::Classic, crash()).expect("valid");
    let tpc_crash = run_2pc(&votes, crash()).expect("valid");
    r.check("blocks like 2PC", pc_crash.blocked == tpc_crash.blocked && pc_crash.blocked.len() == 3, format!("{:?}", pc_crash.blocked));
    r.artifact("paxos-commit", Artifact::Commit(pc));
    r.artifact("two-phase", Artifact::Commit(tpc));
    r.artifact("paxos-commit-crash", Artifact::Commit(pc_crash));
}

fn spontaneous_prepare_hazard(r: &mut ScenarioReport) {
    let bad = spontaneous_prepare(true);
    r.check("spontaneous prepare commits", bad.decision == Some(Decision::Commit), format!("{:?}", bad.decision));
    r.check("acknowledged update lost", bad.lost == [2], format!("issued {:?}, installed {:?}", bad.issued, bad.installed));
    let good = spontaneous_prepare(false);
    r.check("prepare on request keeps all", good.lost.is_empty() && good.installed == [1, 2, 3], format!("installed {:?}", good.installed));
}

// ---- replication

fn eager_deadlock(r: &mut ScenarioReport) {
    let run = eager_deadlock_demo();
    let m = &run.metrics;
    r.check("one deadlock", m.deadlocks == 1, m.deadlocks);
    r.check("one commits, one aborts", m.committed == 1 && m.aborted == 1, format!("{} committed, {} aborted", m.committed, m.aborted));
    r.check("replicas agree", m.converged, "both copies equal");
    if let Some(h) = run.history {
        r.check("history serializable", serializable(&h), "acyclic");
        r.artifact("history", Artifact::History(h));
    }
}

fn lazy_inconsistency(r: &mut ScenarioReport) {
    let early = lazy_inconsistency_demo(DeliveryOrder::Arrival, 3);
    r.check("query sees y without x", early.observed == (0, 1), format!("{:?}", early.observed));
    r.check("not serializable", !early.serializable, "query reads T4 without its prerequisite T3");
    let causal = lazy_inconsistency_demo(DeliveryOrder::Causal, 3);
    r.check("in-order delivery hides y", causal.observed == (0, 0) && causal.serializable, format!("{:?}", causal.observed));
    let late = lazy_inconsistency_demo(DeliveryOrder::Arrival, 7);
    r.check("eventually consistent", late.observed == (1, 1) && late.serializable, format!("{:?}", late.observed));
    r.artifact("arrival-history", Artifact::History(early.history));
    r.artifact("causal-history", Artifact::History(causal.history));
}

/// Every order of `items`.
fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for tail in permutations(&rest) {
            let mut p = vec![head.clone()];
            p.extend(tail);
            out.push(p);
        }
    }
    out
}

fn thomas_convergence(r: &mut ScenarioReport) {
    let writes: Vec<ReplicaWrite> =
        (1..=4).map(|k| ReplicaWrite { id: k, item: 0, old: 0, new: 10 * k as i64, ts: k, origin: k as usize % 3 }).collect();
    let orders = permutations(&writes);
    let mut diverged = 0;
    for (k, order) in orders.iter().enumerate() {
        let mut nodes: Vec<NodeState> = (0..3).map(|n| NodeState::base(n, [0], |_| 0)).collect();
        for (n, node) in nodes.iter_mut().enumerate() {
            let mine = &orders[(k + 7 * n) % orders.len()];
            let seq = if n == 0 { order } else { mine };
            // replica n sees the first n writes twice
            for w in seq.iter().chain(seq.iter().take(n)) {
                node.apply_thomas(w).expect("replica exists");
            }
        }
        if nodes.iter().any(|n| n.replicas != nodes[0].replicas || n.value(0) != Some(40)) {
            diverged += 1;
        }
    }
    r.check("24 orders", orders.len() == 24, orders.len());
    r.check("replicas identical", diverged == 0, format!("{diverged} diverged"));
}

fn two_tier_roundtrip(r: &mut ScenarioReport) {
    const ACCOUNT: u32 = 0;
    let setup = || {
        let mut s = TwoTier::new(&[(ACCOUNT, 100), (1, 0)], &[ACCOUNT, 1], &[1]).expect("valid");
        s.disconnect();
        s.run_mobile(MobileTxn { name: "withdraw".into(), program: Program::Debit { item: ACCOUNT, amount: 80 } }).expect("disconnected");
        s.base_update(ACCOUNT, 50).expect("base owns the account");
        s
    };
    let mut strict = setup();
    let rt = strict.reconnect(&exact).expect("disconnected");
    r.check("rejected under exact acceptance", rt.rejected.len() == 1 && rt.installed.is_empty(), format!("{:?}", rt.rejected));
    let diagnostic = rt.rejected.first().map(|(_, d)| d.clone()).unwrap_or_default();
    r.check("diagnostic names the transaction", diagnostic.contains("withdraw"), diagnostic);
    r.check("mobile refreshed from base", strict.mobile.values() == strict.base_subset(), format!("{:?}", strict.mobile.values()));
    let mut lenient = setup();
    let always = |_: &TxnResult, _: &TxnResult| true;
    let rt = lenient.reconnect(&always).expect("disconnected");
    r.check("installed under always-accept", rt.installed == ["withdraw"], format!("{:?}", rt.installed));
    r.check("mobile equals base after refresh", lenient.mobile.values() == lenient.base_subset(), format!("{:?}", lenient.mobile.values()));
}

// ---- saga-compensation

fn saga_compensation(r: &mut ScenarioReport) {
    let steps = itinerary();
    let mut store = Store::new();
    stock_itinerary(&mut store, 2).expect("fresh store");
    let before = store.stable().clone();
    let run = run_saga_failing_at(&mut store, &steps, 2).expect("step exists");
    r.check("car failure compensates", run.outcome == SagaOutcome::CompensatedAt { step: 2 }, format!("{:?}", run.outcome));
    r.check("hotel then flight", run.compensated() == [1, 0], format!("{:?}", run.compensated()));
    r.check("state restored", store.stable() == &before, "inventory as before");
    r.artifact("saga", Artifact::Saga(run));

    let (estimate, deposit) = (store.begin(), store.begin());
    store.write(deposit, "deposit", Value::Int(200)).expect("active");
    store.add_commit_dependency(deposit, estimate).expect("acyclic");
    let held = store.commit(deposit).expect("active");
    store.commit(estimate).expect("active");
    r.check("deposit waits for the estimate", held == crate::store::CommitStatus::Waiting, format!("{held:?}"));
    r.check("commit order follows the dependency", dependency_order_holds(store.log(), &[(deposit, estimate)]), "prerequisite first");
    r.artifact("log", Artifact::Log(store.log().to_vec()));
}
