//! Schedulers that execute transactional operations against the lock table
//! and stores, recording the resulting history.
//!
//! [`LockingEngine`] runs every operation under the lock plan of its degree of
//! consistency. Uncommitted writes are visible in place (the shared state the
//! operations see), which is what lets degrees 0 and 1 read dirty data; the
//! [`Store`] only receives a transaction's writes when it commits.
//! [`SnapshotEngine`] runs the same operations under snapshot isolation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::history::History;
use crate::lock::{lock_plan_for, Access, Degree, Duration, LockMode, LockOutcome, LockTable, Policy, Predicate, ResourceId};
use crate::mvcc::{SiCommit, SiStore};
use crate::store::Store;
use crate::types::{table_of, Key, TxnId, Value};

/// How scans are protected against phantoms under the locking engine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum PhantomMode {
    /// Lock only the rows a scan sees.
    #[default]
    RecordOnly,
    /// S predicate locks on scans, X point-predicate locks on every row image a
    /// write produces or removes.
    Predicate,
    /// Scans S-lock the whole table node.
    Hierarchy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Isolation {
    Locking(Degree),
    Snapshot,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Op {
    Read(Key),
    Write(Key, Value),
    Insert(Key, Value),
    Delete(Key),
    Scan(Predicate),
}

impl Op {
    pub fn is_update(&self) -> bool {
        matches!(self, Op::Write(..) | Op::Insert(..) | Op::Delete(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Observed {
    Nothing,
    Value(Option<Value>),
    Rows(BTreeMap<Key, Value>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    Done(Observed),
    /// Waiting for a lock; retry the same operation later.
    Blocked,
    /// The transaction was aborted (deadlock victim or failed validation).
    Aborted,
}

/// Common driver interface over the locking and snapshot engines.
pub trait Engine {
    fn load(&mut self, rows: BTreeMap<Key, Value>);
    fn begin(&mut self) -> TxnId;
    fn step(&mut self, txn: TxnId, op: &Op) -> Step;
    fn commit(&mut self, txn: TxnId) -> Step;
    fn abort(&mut self, txn: TxnId);
    /// Aborts deadlock victims and returns them.
    fn resolve_deadlocks(&mut self) -> Vec<TxnId>;
    /// Whether `txn` is queued for a lock.
    fn is_waiting(&self, txn: TxnId) -> bool;
    fn history(&self) -> &History;
    /// Committed state.
    fn committed_state(&self) -> BTreeMap<Key, Value>;
}

enum LockReq {
    Res(ResourceId, LockMode, Duration),
    Pred(Predicate, LockMode, Duration),
}

#[derive(Clone, Debug)]
pub struct LockingEngine {
    degree: Degree,
    phantom: PhantomMode,
    db: ResourceId,
    locks: LockTable,
    store: Store,
    /// Uncommitted writes per key, oldest first.
    pending: BTreeMap<Key, Vec<(TxnId, Option<Value>)>>,
    history: History,
    active: BTreeSet<TxnId>,
}

impl LockingEngine {
    pub fn new(degree: Degree, phantom: PhantomMode) -> Self {
        LockingEngine {
            degree,
            phantom,
            db: ResourceId::new(["db"]),
            locks: LockTable::new(Policy::Strict),
            store: Store::new(),
            pending: BTreeMap::new(),
            history: History::new(),
            active: BTreeSet::new(),
        }
    }

    pub fn locks(&self) -> &LockTable {
        &self.locks
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn active(&self) -> impl Iterator<Item = TxnId> + '_ {
        self.active.iter().copied()
    }

    fn table_node(&self, key_or_table: &str) -> ResourceId {
        self.db.child(table_of(key_or_table))
    }

    fn record(&self, key: &str) -> ResourceId {
        self.table_node(key).child(key)
    }

    /// Current shared value, including uncommitted writes.
    fn visible(&self, key: &str) -> Option<Value> {
        match self.pending.get(key).and_then(|p| p.last()) {
            Some((_, v)) => v.clone(),
            None => self.store.read_committed(key).cloned(),
        }
    }

    fn visible_rows(&self, pred: &Predicate) -> BTreeMap<Key, Value> {
        let keys: BTreeSet<&Key> =
            self.store.stable().keys().chain(self.pending.keys()).filter(|k| table_of(k) == pred.table).collect();
        keys.into_iter()
            .filter_map(|k| self.visible(k).filter(|v| pred.matches(v)).map(|v| (k.clone(), v)))
            .collect()
    }

    fn plan(&self, txn: TxnId, op: &Op) -> Vec<LockReq> {
        let access = if op.is_update() { Access::Write } else { Access::Read };
        let Some((mode, dur)) = lock_plan_for(self.degree, access) else {
            return Vec::new();
        };
        let intention = if mode == LockMode::X { LockMode::IX } else { LockMode::IS };
        let mut reqs = alloc::vec![LockReq::Res(self.db.clone(), intention, Duration::Long)];
        match op {
            Op::Scan(pred) => {
                let table = self.table_node(&pred.table);
                match self.phantom {
                    PhantomMode::Hierarchy => reqs.push(LockReq::Res(table, mode, dur)),
                    PhantomMode::Predicate => reqs.push(LockReq::Pred(pred.clone(), mode, dur)),
                    PhantomMode::RecordOnly => {
                        reqs.push(LockReq::Res(table, intention, Duration::Long));
                        let mut keys: BTreeSet<Key> = self.store.stable().keys().cloned().collect();
                        keys.extend(self.pending.keys().cloned());
                        for k in keys.into_iter().filter(|k| table_of(k) == pred.table) {
                            // rows another transaction has deleted but not committed are still locked
                            if self.visible(&k).is_some() || self.pending.get(&k).is_some_and(|p| p.iter().any(|(t, _)| *t != txn)) {
                                let r = self.record(&k);
                                reqs.push(LockReq::Res(r, mode, dur));
                            }
                        }
                    }
                }
            }
            Op::Read(k) | Op::Write(k, _) | Op::Insert(k, _) | Op::Delete(k) => {
                reqs.push(LockReq::Res(self.table_node(k), intention, Duration::Long));
                reqs.push(LockReq::Res(self.record(k), mode, dur));
                if self.phantom == PhantomMode::Predicate && op.is_update() {
                    let table = table_of(k);
                    let new = match op {
                        Op::Write(_, v) | Op::Insert(_, v) => Some(v.clone()),
                        _ => None,
                    };
                    for image in [self.visible(k), new].into_iter().flatten() {
                        reqs.push(LockReq::Pred(Predicate::point(table, &image), LockMode::X, dur));
                    }
                }
            }
        }
        reqs
    }

    fn acquire_all(&mut self, txn: TxnId, reqs: &[LockReq]) -> bool {
        for req in reqs {
            let outcome = match req {
                LockReq::Res(r, mode, dur) => {
                    if self.locks.holds(txn, r).is_some_and(|held| held.covers(*mode)) {
                        continue;
                    }
                    self.locks.acquire(txn, r, *mode, *dur)
                }
                LockReq::Pred(p, mode, dur) => self.locks.predicate_acquire(txn, p, *mode, *dur),
            };
            match outcome.expect("engine lock plans are well formed") {
                LockOutcome::Granted => {}
                LockOutcome::Blocked => return false,
            }
        }
        true
    }

    fn release_short(&mut self, txn: TxnId, reqs: &[LockReq]) {
        for req in reqs.iter().rev() {
            match req {
                LockReq::Res(r, _, Duration::Short) => {
                    self.locks.release_short(txn, r).expect("short grants may always be released");
                }
                LockReq::Pred(p, _, Duration::Short) => {
                    self.locks.release_short_predicate(txn, p);
                }
                _ => {}
            }
        }
    }

    fn stage(&mut self, txn: TxnId, key: &Key, value: Option<Value>) {
        let chain = self.pending.entry(key.clone()).or_default();
        chain.retain(|(t, _)| *t != txn);
        chain.push((txn, value.clone()));
        match value {
            Some(v) => self.store.write(txn, key.clone(), v),
            None => self.store.delete(txn, key.clone()),
        }
        .expect("engine only writes for active transactions");
    }

    fn unstage(&mut self, txn: TxnId) {
        for chain in self.pending.values_mut() {
            chain.retain(|(t, _)| *t != txn);
        }
        self.pending.retain(|_, c| !c.is_empty());
    }

    fn finish_abort(&mut self, txn: TxnId) {
        if self.active.remove(&txn) {
            self.unstage(txn);
            let _ = self.store.abort(txn);
            self.history.abort(txn);
        }
    }
}

impl Engine for LockingEngine {
    fn load(&mut self, rows: BTreeMap<Key, Value>) {
        let t = self.store.begin();
        for (k, v) in &rows {
            self.store.write(t, k.clone(), v.clone()).expect("fresh transaction");
        }
        self.store.commit(t).expect("fresh transaction");
        self.history.load(rows);
    }

    fn begin(&mut self) -> TxnId {
        let t = self.store.begin();
        self.locks.begin(t);
        self.history.begin(t);
        self.active.insert(t);
        t
    }

    fn step(&mut self, txn: TxnId, op: &Op) -> Step {
        if !self.active.contains(&txn) {
            return Step::Aborted;
        }
        let reqs = self.plan(txn, op);
        if !self.acquire_all(txn, &reqs) {
            return Step::Blocked;
        }
        let observed = match op {
            Op::Read(k) => {
                let v = self.visible(k);
                self.history.read(txn, k.clone(), v.clone());
                Observed::Value(v)
            }
            Op::Scan(pred) => {
                let rows = self.visible_rows(pred);
                self.history.predicate_read(txn, pred.clone(), rows.clone());
                Observed::Rows(rows)
            }
            Op::Write(k, v) => {
                self.stage(txn, k, Some(v.clone()));
                self.history.write(txn, k.clone(), v.clone());
                Observed::Nothing
            }
            Op::Insert(k, v) => {
                self.stage(txn, k, Some(v.clone()));
                self.history.insert(txn, k.clone(), v.clone());
                Observed::Nothing
            }
            Op::Delete(k) => {
                let before = self.visible(k);
                self.stage(txn, k, None);
                self.history.delete(txn, k.clone(), before);
                Observed::Nothing
            }
        };
        self.release_short(txn, &reqs);
        Step::Done(observed)
    }

    fn commit(&mut self, txn: TxnId) -> Step {
        if !self.active.remove(&txn) {
            return Step::Aborted;
        }
        self.store.commit(txn).expect("active transaction");
        self.unstage(txn);
        self.history.commit(txn);
        self.locks.release_all(txn);
        Step::Done(Observed::Nothing)
    }

    fn abort(&mut self, txn: TxnId) {
        self.locks.abort(txn);
        self.finish_abort(txn);
    }

    fn resolve_deadlocks(&mut self) -> Vec<TxnId> {
        let (victims, _) = self.locks.resolve_deadlocks();
        for v in &victims {
            self.finish_abort(*v);
        }
        victims
    }

    fn is_waiting(&self, txn: TxnId) -> bool {
        self.locks.is_blocked(txn)
    }

    fn history(&self) -> &History {
        &self.history
    }

    fn committed_state(&self) -> BTreeMap<Key, Value> {
        self.store.stable().clone()
    }
}

/// Snapshot isolation over [`SiStore`]. Never blocks.
#[derive(Clone, Debug, Default)]
pub struct SnapshotEngine {
    store: SiStore,
    history: History,
}

impl SnapshotEngine {
    pub fn new() -> Self {
        SnapshotEngine { store: SiStore::new(), history: History::new() }
    }

    pub fn store(&self) -> &SiStore {
        &self.store
    }
}

impl Engine for SnapshotEngine {
    fn load(&mut self, rows: BTreeMap<Key, Value>) {
        self.store.load(rows.clone());
        self.history.load(rows);
    }

    fn begin(&mut self) -> TxnId {
        let t = self.store.begin();
        self.history.begin(t);
        t
    }

    fn step(&mut self, txn: TxnId, op: &Op) -> Step {
        let observed = match op {
            Op::Read(k) => match self.store.read(txn, k) {
                Ok(v) => {
                    self.history.read(txn, k.clone(), v.clone());
                    Observed::Value(v)
                }
                Err(_) => return Step::Aborted,
            },
            Op::Scan(pred) => match self.store.scan(txn, &pred.table) {
                Ok(rows) => {
                    let rows: BTreeMap<Key, Value> = rows.into_iter().filter(|(_, v)| pred.matches(v)).collect();
                    self.history.predicate_read(txn, pred.clone(), rows.clone());
                    Observed::Rows(rows)
                }
                Err(_) => return Step::Aborted,
            },
            Op::Write(k, v) | Op::Insert(k, v) => {
                if self.store.write(txn, k.clone(), v.clone()).is_err() {
                    return Step::Aborted;
                }
                if matches!(op, Op::Insert(..)) {
                    self.history.insert(txn, k.clone(), v.clone());
                } else {
                    self.history.write(txn, k.clone(), v.clone());
                }
                Observed::Nothing
            }
            Op::Delete(k) => {
                let before = self.store.read(txn, k).ok().flatten();
                if self.store.delete(txn, k.clone()).is_err() {
                    return Step::Aborted;
                }
                self.history.delete(txn, k.clone(), before);
                Observed::Nothing
            }
        };
        Step::Done(observed)
    }

    fn commit(&mut self, txn: TxnId) -> Step {
        match self.store.commit(txn) {
            Ok(SiCommit::Committed(_)) => {
                self.history.commit(txn);
                Step::Done(Observed::Nothing)
            }
            Ok(SiCommit::FirstWriterWins) => {
                self.history.abort(txn);
                Step::Aborted
            }
            Err(_) => Step::Aborted,
        }
    }

    fn abort(&mut self, txn: TxnId) {
        if self.store.abort(txn).is_ok() {
            self.history.abort(txn);
        }
    }

    fn resolve_deadlocks(&mut self) -> Vec<TxnId> {
        Vec::new()
    }

    fn is_waiting(&self, _txn: TxnId) -> bool {
        false
    }

    fn history(&self) -> &History {
        &self.history
    }

    fn committed_state(&self) -> BTreeMap<Key, Value> {
        self.store.consistent_read_at(self.store.latest_ts())
    }
}

/// Builds the engine for an isolation setting.
pub fn engine_for(isolation: Isolation, phantom: PhantomMode) -> AnyEngine {
    match isolation {
        Isolation::Locking(d) => AnyEngine::Locking(LockingEngine::new(d, phantom)),
        Isolation::Snapshot => AnyEngine::Snapshot(SnapshotEngine::new()),
    }
}

#[derive(Clone, Debug)]
pub enum AnyEngine {
    Locking(LockingEngine),
    Snapshot(SnapshotEngine),
}

impl AnyEngine {
    fn inner(&self) -> &dyn Engine {
        match self {
            AnyEngine::Locking(e) => e,
            AnyEngine::Snapshot(e) => e,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Engine {
        match self {
            AnyEngine::Locking(e) => e,
            AnyEngine::Snapshot(e) => e,
        }
    }

    pub fn lock_table(&self) -> Option<&LockTable> {
        match self {
            AnyEngine::Locking(e) => Some(e.locks()),
            AnyEngine::Snapshot(_) => None,
        }
    }
}

impl Engine for AnyEngine {
    fn load(&mut self, rows: BTreeMap<Key, Value>) {
        self.inner_mut().load(rows)
    }
    fn begin(&mut self) -> TxnId {
        self.inner_mut().begin()
    }
    fn step(&mut self, txn: TxnId, op: &Op) -> Step {
        self.inner_mut().step(txn, op)
    }
    fn commit(&mut self, txn: TxnId) -> Step {
        self.inner_mut().commit(txn)
    }
    fn abort(&mut self, txn: TxnId) {
        self.inner_mut().abort(txn)
    }
    fn resolve_deadlocks(&mut self) -> Vec<TxnId> {
        self.inner_mut().resolve_deadlocks()
    }
    fn is_waiting(&self, txn: TxnId) -> bool {
        self.inner().is_waiting(txn)
    }
    fn history(&self) -> &History {
        self.inner().history()
    }
    fn committed_state(&self) -> BTreeMap<Key, Value> {
        self.inner().committed_state()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::{detect_anomalies, is_serializable, Anomaly};
    use crate::lock::{two_phase_check, Interval};

    fn rows(pairs: &[(&str, i64)]) -> BTreeMap<Key, Value> {
        pairs.iter().map(|(k, v)| (Key::from(*k), Value::Int(*v))).collect()
    }

    fn done(s: Step) -> Observed {
        match s {
            Step::Done(o) => o,
            other => panic!("expected done, got {other:?}"),
        }
    }

    #[test]
    fn d1_admits_dirty_read_d2_does_not() {
        for (degree, dirty) in [(Degree::D1, true), (Degree::D2, false)] {
            let mut e = LockingEngine::new(degree, PhantomMode::RecordOnly);
            e.load(rows(&[("x", 0)]));
            let t1 = e.begin();
            let t2 = e.begin();
            done(e.step(t1, &Op::Write("x".into(), Value::Int(1))));
            let r = e.step(t2, &Op::Read("x".into()));
            if dirty {
                assert_eq!(done(r), Observed::Value(Some(Value::Int(1))));
            } else {
                assert_eq!(r, Step::Blocked);
            }
            e.commit(t1);
            done(e.step(t2, &Op::Read("x".into())));
            e.commit(t2);
            assert_eq!(detect_anomalies(e.history()).contains(&Anomaly::DirtyRead), dirty);
        }
    }

    #[test]
    fn d3_blocks_writer_until_reader_commits() {
        let mut e = LockingEngine::new(Degree::D3, PhantomMode::RecordOnly);
        e.load(rows(&[("x", 0)]));
        let (t1, t2) = (e.begin(), e.begin());
        done(e.step(t1, &Op::Read("x".into())));
        assert_eq!(e.step(t2, &Op::Write("x".into(), Value::Int(5))), Step::Blocked);
        done(e.step(t1, &Op::Read("x".into())));
        e.commit(t1);
        done(e.step(t2, &Op::Write("x".into(), Value::Int(5))));
        e.commit(t2);
        assert!(detect_anomalies(e.history()).is_empty());
        assert!(two_phase_check(e.locks().trace()));
        assert_eq!(e.committed_state()["x"], Value::Int(5));
    }

    #[test]
    fn conversion_deadlock_is_resolved() {
        let mut e = LockingEngine::new(Degree::D3, PhantomMode::RecordOnly);
        e.load(rows(&[("x", 0)]));
        let (t1, t2) = (e.begin(), e.begin());
        done(e.step(t1, &Op::Read("x".into())));
        done(e.step(t2, &Op::Read("x".into())));
        assert_eq!(e.step(t1, &Op::Write("x".into(), Value::Int(1))), Step::Blocked);
        assert_eq!(e.step(t2, &Op::Write("x".into(), Value::Int(2))), Step::Blocked);
        assert_eq!(e.resolve_deadlocks(), [t2]);
        done(e.step(t1, &Op::Write("x".into(), Value::Int(1))));
        e.commit(t1);
        assert!(is_serializable(e.history()).unwrap());
    }

    #[test]
    fn abort_restores_shared_state() {
        let mut e = LockingEngine::new(Degree::D1, PhantomMode::RecordOnly);
        e.load(rows(&[("x", 0)]));
        let t1 = e.begin();
        done(e.step(t1, &Op::Write("x".into(), Value::Int(9))));
        e.abort(t1);
        let t2 = e.begin();
        assert_eq!(done(e.step(t2, &Op::Read("x".into()))), Observed::Value(Some(Value::Int(0))));
    }

    fn acct(loc: &str, bal: i64) -> Value {
        Value::record([("Location", Value::from(loc)), ("Balance", Value::Int(bal))])
    }

    #[test]
    fn predicate_lock_blocks_napa_insert() {
        let napa = Predicate::all("Accounts", [("Location", Interval::exactly("Napa"))]);
        for (mode, blocks) in [(PhantomMode::RecordOnly, false), (PhantomMode::Predicate, true), (PhantomMode::Hierarchy, true)] {
            let mut e = LockingEngine::new(Degree::D3, mode);
            e.load([("Accounts/1".into(), acct("Napa", 10))].into());
            let (t1, t2) = (e.begin(), e.begin());
            done(e.step(t1, &Op::Scan(napa.clone())));
            let s = e.step(t2, &Op::Insert("Accounts/2".into(), acct("Napa", 5)));
            assert_eq!(s == Step::Blocked, blocks, "{mode:?}");
        }
    }

    #[test]
    fn sonoma_insert_passes_napa_predicate_lock() {
        let napa = Predicate::all("Accounts", [("Location", Interval::exactly("Napa"))]);
        let mut e = LockingEngine::new(Degree::D3, PhantomMode::Predicate);
        e.load([("Accounts/1".into(), acct("Napa", 10))].into());
        let (t1, t2) = (e.begin(), e.begin());
        done(e.step(t1, &Op::Scan(napa)));
        done(e.step(t2, &Op::Insert("Accounts/2".into(), acct("Sonoma", 5))));
    }

    #[test]
    fn snapshot_engine_write_skew() {
        let mut e = SnapshotEngine::new();
        e.load(rows(&[("x", 50), ("y", 50)]));
        let (t1, t2) = (e.begin(), e.begin());
        for t in [t1, t2] {
            done(e.step(t, &Op::Read("x".into())));
            done(e.step(t, &Op::Read("y".into())));
        }
        done(e.step(t1, &Op::Write("x".into(), Value::Int(-40))));
        done(e.step(t2, &Op::Write("y".into(), Value::Int(-40))));
        assert!(matches!(e.commit(t1), Step::Done(_)));
        assert!(matches!(e.commit(t2), Step::Done(_)));
        assert!(!is_serializable(e.history()).unwrap());
        assert_eq!(detect_anomalies(e.history()), [Anomaly::WriteSkew].into());
    }
}
