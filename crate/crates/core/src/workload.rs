//! Seeded workload generation, explicit scripts, and exhaustive interleaving.
//!
//! Workloads draw every transaction's operations from the seed before running
//! them, and a separate stream picks which transaction moves next, so the same
//! spec always yields the same history. Updates are read-modify-write and every
//! written value is unique, which lets the history oracles match reads to the
//! writes that produced them.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{engine_for, AnyEngine, Engine, Isolation, Observed, Op, PhantomMode, Step};
use crate::history::History;
use crate::lock::{Interval, Predicate};
use crate::types::{Key, TxnId, Value};

pub const TABLE: &str = "t";
const GROUPS: i64 = 4;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct WorkloadSpec {
    pub txn_count: usize,
    pub ops_per_txn: usize,
    pub key_space: usize,
    /// Fraction of operations that only read (point reads and scans).
    pub read_fraction: f64,
    /// Of the reads, the fraction that are predicate scans.
    pub scan_fraction: f64,
    /// Of the updates, the fraction that insert a fresh row.
    pub insert_fraction: f64,
    pub isolation: Isolation,
    pub phantom: PhantomMode,
    /// Transactions running at once.
    pub concurrency: usize,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            txn_count: 100,
            ops_per_txn: 4,
            key_space: 8,
            read_fraction: 0.5,
            scan_fraction: 0.2,
            insert_fraction: 0.2,
            isolation: Isolation::Locking(crate::lock::Degree::D3),
            phantom: PhantomMode::Predicate,
            concurrency: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("{0} must lie in [0, 1]")]
    NotAFraction(&'static str),
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [("txnCount", self.txn_count), ("keySpace", self.key_space), ("concurrency", self.concurrency)] {
            if v == 0 {
                return Err(ConfigError::NotPositive(name));
            }
        }
        for (name, f) in [("readFraction", self.read_fraction), ("scanFraction", self.scan_fraction), ("insertFraction", self.insert_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(ConfigError::NotAFraction(name));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct WorkloadMetrics {
    pub committed: usize,
    pub aborted: usize,
    pub deadlocks: usize,
    pub blocked_steps: usize,
    pub steps: usize,
}

/// One scripted action.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    Op(Op),
    Commit,
    Abort,
}

pub fn row(group: i64, v: i64) -> Value {
    Value::record([("g", Value::Int(group)), ("v", Value::Int(v))])
}

pub fn key(i: usize) -> Key {
    format!("{TABLE}/k{i}")
}

pub fn group_predicate(lo: i64, hi: i64) -> Predicate {
    Predicate::all(TABLE, [("g", Interval::between(lo, hi))])
}

pub fn initial_rows(key_space: usize) -> BTreeMap<Key, Value> {
    (0..key_space).map(|i| (key(i), row(i as i64 % GROUPS, -(i as i64) - 1))).collect()
}

/// The operations of every transaction, drawn from the seed.
pub fn generate(spec: &WorkloadSpec) -> Vec<Vec<Action>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.txn_count)
        .map(|t| {
            let mut actions = Vec::new();
            for op in 0..spec.ops_per_txn {
                let unique = (t as i64 + 1) * 1000 + op as i64;
                if rng.random::<f64>() < spec.read_fraction {
                    if rng.random::<f64>() < spec.scan_fraction {
                        let lo = rng.random_range(0..GROUPS);
                        let hi = rng.random_range(lo..GROUPS);
                        actions.push(Action::Op(Op::Scan(group_predicate(lo, hi))));
                    } else {
                        actions.push(Action::Op(Op::Read(key(rng.random_range(0..spec.key_space)))));
                    }
                } else if rng.random::<f64>() < spec.insert_fraction {
                    let k = format!("{TABLE}/n{t}_{op}");
                    actions.push(Action::Op(Op::Insert(k, row(rng.random_range(0..GROUPS), unique))));
                } else {
                    let k = key(rng.random_range(0..spec.key_space));
                    actions.push(Action::Op(Op::Read(k.clone())));
                    actions.push(Action::Op(Op::Write(k, row(rng.random_range(0..GROUPS), unique))));
                }
            }
            actions.push(Action::Commit);
            actions
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct WorkloadRun {
    pub history: History,
    pub metrics: WorkloadMetrics,
    pub engine: AnyEngine,
}

/// Generates and runs a workload.
pub fn run_workload(spec: &WorkloadSpec) -> Result<WorkloadRun, ConfigError> {
    spec.validate()?;
    let plans = generate(spec);
    let mut engine = engine_for(spec.isolation, spec.phantom);
    engine.load(initial_rows(spec.key_space));
    let mut sched = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut metrics = WorkloadMetrics::default();
    let mut next_plan = 0;
    // (txn, plan index, next action)
    let mut running: Vec<(TxnId, usize, usize)> = Vec::new();
    loop {
        while running.len() < spec.concurrency && next_plan < plans.len() {
            running.push((engine.begin(), next_plan, 0));
            next_plan += 1;
        }
        if running.is_empty() {
            break;
        }
        let runnable: Vec<usize> = (0..running.len()).filter(|i| !engine.is_waiting(running[*i].0)).collect();
        if runnable.is_empty() {
            let victims = engine.resolve_deadlocks();
            assert!(!victims.is_empty(), "every running transaction waits, yet no deadlock was found");
            metrics.deadlocks += victims.len();
            metrics.aborted += victims.len();
            running.retain(|r| !victims.contains(&r.0));
            continue;
        }
        let pick = runnable[sched.random_range(0..runnable.len())];
        let (txn, plan, pos) = running[pick];
        metrics.steps += 1;
        let finished = match &plans[plan][pos] {
            Action::Op(op) => match engine.step(txn, op) {
                Step::Done(_) => {
                    running[pick].2 += 1;
                    false
                }
                Step::Blocked => {
                    metrics.blocked_steps += 1;
                    false
                }
                Step::Aborted => {
                    metrics.aborted += 1;
                    true
                }
            },
            Action::Commit => {
                match engine.commit(txn) {
                    Step::Done(_) => metrics.committed += 1,
                    _ => metrics.aborted += 1,
                }
                true
            }
            Action::Abort => {
                engine.abort(txn);
                metrics.aborted += 1;
                true
            }
        };
        if finished {
            running.swap_remove(pick);
        }
    }
    Ok(WorkloadRun { history: engine.history().clone(), metrics, engine })
}

/// Outcome of a scripted run.
#[derive(Clone, Debug)]
pub struct ScriptRun<E> {
    pub engine: E,
    /// Engine transaction id per script transaction index.
    pub txns: Vec<TxnId>,
    /// What each script transaction's operations observed, in order.
    pub observed: Vec<Vec<Observed>>,
    pub committed: Vec<bool>,
    pub deadlock_victims: Vec<TxnId>,
}

/// Runs `(txn index, action)` steps in the given order. A step that blocks is
/// held back with the rest of its transaction and retried after every later
/// step; if everything left is waiting, deadlocks are resolved.
pub fn run_script<E: Engine>(mut engine: E, txn_count: usize, steps: &[(usize, Action)]) -> ScriptRun<E> {
    let mut txns: Vec<Option<TxnId>> = alloc::vec![None; txn_count];
    let mut backlog: Vec<VecDeque<Action>> = alloc::vec![VecDeque::new(); txn_count];
    let mut observed: Vec<Vec<Observed>> = alloc::vec![Vec::new(); txn_count];
    let mut done: Vec<Option<bool>> = alloc::vec![None; txn_count];
    let mut victims = Vec::new();

    fn drain<E: Engine>(
        engine: &mut E,
        i: usize,
        txns: &mut [Option<TxnId>],
        backlog: &mut [VecDeque<Action>],
        observed: &mut [Vec<Observed>],
        done: &mut [Option<bool>],
    ) -> bool {
        let mut progressed = false;
        while let Some(action) = backlog[i].front().cloned() {
            if done[i].is_some() {
                backlog[i].clear();
                break;
            }
            let txn = *txns[i].get_or_insert_with(|| engine.begin());
            let step = match &action {
                Action::Op(op) => engine.step(txn, op),
                Action::Commit => engine.commit(txn),
                Action::Abort => {
                    engine.abort(txn);
                    Step::Aborted
                }
            };
            match step {
                Step::Blocked => break,
                Step::Done(o) => {
                    backlog[i].pop_front();
                    progressed = true;
                    match action {
                        Action::Op(_) => observed[i].push(o),
                        _ => done[i] = Some(true),
                    }
                }
                Step::Aborted => {
                    backlog[i].clear();
                    progressed = true;
                    done[i] = Some(false);
                }
            }
        }
        progressed
    }

    for (i, action) in steps {
        backlog[*i].push_back(action.clone());
        drain(&mut engine, *i, &mut txns, &mut backlog, &mut observed, &mut done);
        while (0..txn_count).any(|j| drain(&mut engine, j, &mut txns, &mut backlog, &mut observed, &mut done)) {}
    }
    while backlog.iter().any(|b| !b.is_empty()) {
        let v = engine.resolve_deadlocks();
        if v.is_empty() {
            break;
        }
        for (j, t) in txns.iter().enumerate() {
            if t.is_some_and(|t| v.contains(&t)) {
                done[j] = Some(false);
                backlog[j].clear();
            }
        }
        victims.extend(v);
        while (0..txn_count).any(|j| drain(&mut engine, j, &mut txns, &mut backlog, &mut observed, &mut done)) {}
    }
    ScriptRun {
        engine,
        txns: txns.into_iter().map(|t| t.unwrap_or_default()).collect(),
        observed,
        committed: done.into_iter().map(|d| d == Some(true)).collect(),
        deadlock_victims: victims,
    }
}

/// Every interleaving of the per-transaction scripts, explored by cloning the
/// engine at each choice point. `visit` sees each finished run.
pub fn explore_interleavings<E, F>(engine: E, scripts: &[Vec<Action>], visit: &mut F)
where
    E: Engine + Clone,
    F: FnMut(&E, &[Vec<Observed>], &[bool]),
{
    struct State<E> {
        engine: E,
        txns: Vec<Option<TxnId>>,
        pos: Vec<usize>,
        observed: Vec<Vec<Observed>>,
        outcome: Vec<Option<bool>>,
    }

    impl<E: Engine + Clone> Clone for State<E> {
        fn clone(&self) -> Self {
            State {
                engine: self.engine.clone(),
                txns: self.txns.clone(),
                pos: self.pos.clone(),
                observed: self.observed.clone(),
                outcome: self.outcome.clone(),
            }
        }
    }

    fn walk<E, F>(s: State<E>, scripts: &[Vec<Action>], visit: &mut F)
    where
        E: Engine + Clone,
        F: FnMut(&E, &[Vec<Observed>], &[bool]),
    {
        let live: Vec<usize> = (0..scripts.len()).filter(|i| s.outcome[*i].is_none()).collect();
        if live.is_empty() {
            let committed: Vec<bool> = s.outcome.iter().map(|o| *o == Some(true)).collect();
            visit(&s.engine, &s.observed, &committed);
            return;
        }
        let runnable: Vec<usize> =
            live.iter().copied().filter(|i| !s.txns[*i].is_some_and(|t| s.engine.is_waiting(t))).collect();
        if runnable.is_empty() {
            let mut next = s.clone();
            let victims: BTreeSet<TxnId> = next.engine.resolve_deadlocks().into_iter().collect();
            assert!(!victims.is_empty(), "all transactions wait without a deadlock");
            for i in 0..scripts.len() {
                if next.txns[i].is_some_and(|t| victims.contains(&t)) {
                    next.outcome[i] = Some(false);
                }
            }
            walk(next, scripts, visit);
            return;
        }
        for i in runnable {
            let mut next = s.clone();
            let txn = *next.txns[i].get_or_insert_with(|| next.engine.begin());
            let action = &scripts[i][next.pos[i]];
            let step = match action {
                Action::Op(op) => next.engine.step(txn, op),
                Action::Commit => next.engine.commit(txn),
                Action::Abort => {
                    next.engine.abort(txn);
                    Step::Aborted
                }
            };
            match step {
                Step::Blocked => {}
                Step::Done(o) => {
                    next.pos[i] += 1;
                    match action {
                        Action::Op(_) => next.observed[i].push(o),
                        _ => next.outcome[i] = Some(true),
                    }
                }
                Step::Aborted => next.outcome[i] = Some(false),
            }
            walk(next, scripts, visit);
        }
    }

    let n = scripts.len();
    let start = State {
        engine,
        txns: alloc::vec![None; n],
        pos: alloc::vec![0; n],
        observed: alloc::vec![Vec::new(); n],
        outcome: alloc::vec![None; n],
    };
    walk(start, scripts, visit);
}
