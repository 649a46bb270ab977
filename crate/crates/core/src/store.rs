//! In-memory versioned entity store with a redo log.
//!
//! The store follows a redo-only, no-steal, force-at-commit discipline:
//! writes are buffered per transaction and only reach the log (and the stable
//! state) when the transaction commits, so restart recovery never has to undo
//! anything. The log and the last checkpoint are the only state that survives
//! [`Store::crash`]; the materialized stable map is rebuilt by
//! [`Store::recover`].
//!
//! Entities come in three kinds. Stable entities are logged and survive a
//! crash. Volatile entities are updated transactionally but are never logged,
//! so a crash loses them. Real entities model the outside world (printed
//! output, dispensed cash): they can only be emitted to, never overwritten, and
//! an emission is deferred until the emitting transaction commits.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::types::{digest, Key, TxnId, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum EntityKind {
    Real,
    #[default]
    Stable,
    Volatile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum RecordKind {
    Update,
    Commit,
    Abort,
    Checkpoint,
}

/// One durable log record. `value == None` on an update record is a delete.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LogRecord {
    pub lsn: u64,
    pub txn: TxnId,
    pub kind: RecordKind,
    pub key: Option<Key>,
    pub value: Option<Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxnStatus {
    Active,
    /// Asked to commit but held back by an unsatisfied commit dependency.
    Waiting,
    Committed,
    Aborted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommitStatus {
    Committed,
    Waiting,
    Aborted,
}

/// A real action that was actually carried out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Emission {
    pub txn: TxnId,
    pub key: Key,
    pub value: Value,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("{0} is not active")]
    TxnNotActive(TxnId),
    #[error("{0} already terminated")]
    TxnAlreadyTerminated(TxnId),
    #[error("{0} is not committed")]
    TxnNotCommitted(TxnId),
    #[error("unknown transaction {0}")]
    UnknownTxn(TxnId),
    #[error("key {0:?} is a real entity and cannot be overwritten")]
    RealEntityWrite(Key),
    #[error("key {0:?} is not a real entity")]
    NotRealEntity(Key),
    #[error("checkpoint requires a quiescent store")]
    NotQuiescent,
    #[error("commit dependency would create a cycle")]
    CycleDetected,
}

#[derive(Clone, Debug, Default)]
struct TxnState {
    status: Option<TxnStatus>,
    stable_writes: BTreeMap<Key, Option<Value>>,
    volatile_writes: BTreeMap<Key, Option<Value>>,
    deferred_real: Vec<(Key, Value)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Checkpoint {
    lsn: u64,
    snapshot: BTreeMap<Key, Value>,
}

#[derive(Clone, Debug, Default)]
pub struct Store {
    // durable
    log: Vec<LogRecord>,
    checkpoint: Option<Checkpoint>,
    kinds: BTreeMap<Key, EntityKind>,
    emitted: Vec<Emission>,
    // volatile
    stable: BTreeMap<Key, Value>,
    volatile: BTreeMap<Key, Value>,
    txns: BTreeMap<TxnId, TxnState>,
    /// dependent -> prerequisites
    deps: BTreeMap<TxnId, BTreeSet<TxnId>>,
    next_txn: u64,
}

impl Store {
    pub fn new() -> Self {
        Self { next_txn: 1, ..Default::default() }
    }

    /// Rebuilds a store from a durable log alone, as after loading a dumped log.
    pub fn from_log(log: Vec<LogRecord>) -> Self {
        let mut store = Store { log, ..Store::new() };
        store.recover();
        store
    }

    pub fn declare(&mut self, key: impl Into<Key>, kind: EntityKind) {
        self.kinds.insert(key.into(), kind);
    }

    pub fn kind_of(&self, key: &str) -> EntityKind {
        self.kinds.get(key).copied().unwrap_or_default()
    }

    pub fn begin(&mut self) -> TxnId {
        let id = TxnId(self.next_txn);
        self.next_txn += 1;
        self.txns.insert(id, TxnState { status: Some(TxnStatus::Active), ..Default::default() });
        id
    }

    pub fn status(&self, txn: TxnId) -> Option<TxnStatus> {
        self.txns.get(&txn).and_then(|t| t.status)
    }

    fn active_mut(&mut self, txn: TxnId) -> Result<&mut TxnState, StoreError> {
        match self.txns.get_mut(&txn) {
            Some(t) if t.status == Some(TxnStatus::Active) => Ok(t),
            _ => Err(StoreError::TxnNotActive(txn)),
        }
    }

    /// Buffers a write; nothing becomes visible to others or durable until commit.
    pub fn write(&mut self, txn: TxnId, key: impl Into<Key>, value: Value) -> Result<(), StoreError> {
        self.put(txn, key.into(), Some(value))
    }

    pub fn delete(&mut self, txn: TxnId, key: impl Into<Key>) -> Result<(), StoreError> {
        self.put(txn, key.into(), None)
    }

    fn put(&mut self, txn: TxnId, key: Key, value: Option<Value>) -> Result<(), StoreError> {
        let kind = self.kind_of(&key);
        let state = self.active_mut(txn)?;
        match kind {
            EntityKind::Real => return Err(StoreError::RealEntityWrite(key)),
            EntityKind::Stable => state.stable_writes.insert(key, value),
            EntityKind::Volatile => state.volatile_writes.insert(key, value),
        };
        Ok(())
    }

    /// Queues a real action; it is carried out only if `txn` commits.
    pub fn emit_real(&mut self, txn: TxnId, key: impl Into<Key>, value: Value) -> Result<(), StoreError> {
        let key = key.into();
        if self.kind_of(&key) != EntityKind::Real {
            return Err(StoreError::NotRealEntity(key));
        }
        self.active_mut(txn)?.deferred_real.push((key, value));
        Ok(())
    }

    /// Reads through the transaction's own buffer, then committed state.
    pub fn read(&self, txn: TxnId, key: &str) -> Result<Option<Value>, StoreError> {
        let state = match self.txns.get(&txn) {
            Some(t) if t.status == Some(TxnStatus::Active) => t,
            _ => return Err(StoreError::TxnNotActive(txn)),
        };
        if let Some(v) = state.stable_writes.get(key).or_else(|| state.volatile_writes.get(key)) {
            return Ok(v.clone());
        }
        Ok(self.read_committed(key).cloned())
    }

    pub fn read_committed(&self, key: &str) -> Option<&Value> {
        match self.kind_of(key) {
            EntityKind::Volatile => self.volatile.get(key),
            _ => self.stable.get(key),
        }
    }

    /// Committed stable state.
    pub fn stable(&self) -> &BTreeMap<Key, Value> {
        &self.stable
    }

    pub fn volatile(&self) -> &BTreeMap<Key, Value> {
        &self.volatile
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn emitted(&self) -> &[Emission] {
        &self.emitted
    }

    pub fn checkpoint_lsn(&self) -> Option<u64> {
        self.checkpoint.as_ref().map(|c| c.lsn)
    }

    pub fn state_digest(&self) -> u64 {
        digest(&self.stable)
    }

    fn append(&mut self, txn: TxnId, kind: RecordKind, key: Option<Key>, value: Option<Value>) -> u64 {
        let lsn = self.log.last().map_or(1, |r| r.lsn + 1);
        self.log.push(LogRecord { lsn, txn, kind, key, value });
        lsn
    }

    /// Declares that `dependent` may not commit before `prerequisite` does.
    pub fn add_commit_dependency(&mut self, dependent: TxnId, prerequisite: TxnId) -> Result<(), StoreError> {
        if !self.txns.contains_key(&prerequisite) {
            return Err(StoreError::UnknownTxn(prerequisite));
        }
        if dependent == prerequisite || self.depends_on(prerequisite, dependent) {
            return Err(StoreError::CycleDetected);
        }
        match self.status(dependent) {
            Some(TxnStatus::Active) => {}
            None => return Err(StoreError::UnknownTxn(dependent)),
            Some(_) => return Err(StoreError::TxnNotActive(dependent)),
        }
        match self.status(prerequisite) {
            Some(TxnStatus::Committed) => {}
            Some(TxnStatus::Aborted) => {
                self.abort(dependent)?;
            }
            _ => {
                self.deps.entry(dependent).or_default().insert(prerequisite);
            }
        }
        Ok(())
    }

    /// Whether `from` transitively depends on `to`.
    fn depends_on(&self, from: TxnId, to: TxnId) -> bool {
        let mut stack = alloc::vec![from];
        let mut seen = BTreeSet::new();
        while let Some(t) = stack.pop() {
            if t == to {
                return true;
            }
            if seen.insert(t) {
                if let Some(pre) = self.deps.get(&t) {
                    stack.extend(pre.iter().copied());
                }
            }
        }
        false
    }

    pub fn commit(&mut self, txn: TxnId) -> Result<CommitStatus, StoreError> {
        match self.status(txn) {
            Some(TxnStatus::Active) => {}
            Some(TxnStatus::Waiting) => return Ok(CommitStatus::Waiting),
            _ => return Err(StoreError::TxnNotActive(txn)),
        }
        let pending = self.deps.get(&txn).is_some_and(|d| !d.is_empty());
        if pending {
            self.txns.get_mut(&txn).expect("known").status = Some(TxnStatus::Waiting);
            return Ok(CommitStatus::Waiting);
        }
        self.install(txn);
        Ok(CommitStatus::Committed)
    }

    fn install(&mut self, txn: TxnId) {
        let state = core::mem::take(self.txns.get_mut(&txn).expect("known"));
        for (key, value) in &state.stable_writes {
            self.append(txn, RecordKind::Update, Some(key.clone()), value.clone());
        }
        self.append(txn, RecordKind::Commit, None, None);
        for (key, value) in state.stable_writes {
            match value {
                Some(v) => self.stable.insert(key, v),
                None => self.stable.remove(&key),
            };
        }
        for (key, value) in state.volatile_writes {
            match value {
                Some(v) => self.volatile.insert(key, v),
                None => self.volatile.remove(&key),
            };
        }
        for (key, value) in state.deferred_real {
            self.emitted.push(Emission { txn, key, value });
        }
        self.txns.get_mut(&txn).expect("known").status = Some(TxnStatus::Committed);
        self.deps.remove(&txn);
        self.settle_dependents(txn);
    }

    /// Releases or aborts dependents after `prereq` terminated.
    fn settle_dependents(&mut self, prereq: TxnId) {
        let committed = self.status(prereq) == Some(TxnStatus::Committed);
        let dependents: Vec<TxnId> = self
            .deps
            .iter()
            .filter(|(_, pre)| pre.contains(&prereq))
            .map(|(d, _)| *d)
            .collect();
        for dep in dependents {
            if !committed {
                let _ = self.abort(dep);
                continue;
            }
            let remaining = self.deps.get_mut(&dep).expect("present");
            remaining.remove(&prereq);
            if remaining.is_empty() {
                self.deps.remove(&dep);
                if self.status(dep) == Some(TxnStatus::Waiting) {
                    self.install(dep);
                }
            }
        }
    }

    pub fn abort(&mut self, txn: TxnId) -> Result<(), StoreError> {
        match self.status(txn) {
            Some(TxnStatus::Active | TxnStatus::Waiting) => {}
            Some(_) => return Err(StoreError::TxnAlreadyTerminated(txn)),
            None => return Err(StoreError::UnknownTxn(txn)),
        }
        self.txns.insert(txn, TxnState { status: Some(TxnStatus::Aborted), ..Default::default() });
        self.append(txn, RecordKind::Abort, None, None);
        self.deps.remove(&txn);
        self.settle_dependents(txn);
        Ok(())
    }

    /// Takes a transaction-consistent checkpoint.
    pub fn checkpoint(&mut self) -> Result<u64, StoreError> {
        let busy = self.txns.values().any(|t| {
            matches!(t.status, Some(TxnStatus::Active | TxnStatus::Waiting)) && !t.stable_writes.is_empty()
        });
        if busy {
            return Err(StoreError::NotQuiescent);
        }
        let lsn = self.append(TxnId(0), RecordKind::Checkpoint, None, None);
        self.checkpoint = Some(Checkpoint { lsn, snapshot: self.stable.clone() });
        Ok(lsn)
    }

    /// Loses every volatile entity and in-flight transaction.
    pub fn crash(&mut self) {
        self.stable.clear();
        self.volatile.clear();
        self.txns.clear();
        self.deps.clear();
    }

    /// Crash in which only the first `keep` log records reached stable storage.
    pub fn crash_truncating(&mut self, keep: usize) {
        self.crash();
        self.log.truncate(keep);
        let last = self.log.last().map_or(0, |r| r.lsn);
        if self.checkpoint.as_ref().is_some_and(|c| c.lsn > last) {
            self.checkpoint = None;
        }
    }

    /// Restart recovery: redo committed updates after the checkpoint and mark
    /// every in-flight transaction aborted.
    pub fn recover(&mut self) -> &BTreeMap<Key, Value> {
        self.crash();
        let from = self.checkpoint.as_ref().map_or(0, |c| c.lsn);
        self.stable = self.checkpoint.as_ref().map(|c| c.snapshot.clone()).unwrap_or_default();

        let mut terminal: BTreeMap<TxnId, TxnStatus> = BTreeMap::new();
        let mut updated: BTreeSet<TxnId> = BTreeSet::new();
        let mut max_txn = 0;
        for rec in &self.log {
            max_txn = max_txn.max(rec.txn.0);
            match rec.kind {
                RecordKind::Commit => {
                    terminal.insert(rec.txn, TxnStatus::Committed);
                }
                RecordKind::Abort => {
                    terminal.insert(rec.txn, TxnStatus::Aborted);
                }
                RecordKind::Update => {
                    updated.insert(rec.txn);
                }
                RecordKind::Checkpoint => {}
            }
        }
        for rec in self.log.iter().filter(|r| r.lsn > from && r.kind == RecordKind::Update) {
            if terminal.get(&rec.txn) == Some(&TxnStatus::Committed) {
                let key = rec.key.clone().expect("update records carry a key");
                match &rec.value {
                    Some(v) => self.stable.insert(key, v.clone()),
                    None => self.stable.remove(&key),
                };
            }
        }
        let in_flight: Vec<TxnId> = updated.into_iter().filter(|t| !terminal.contains_key(t)).collect();
        for txn in in_flight {
            self.append(txn, RecordKind::Abort, None, None);
            terminal.insert(txn, TxnStatus::Aborted);
        }
        for (txn, status) in terminal {
            self.txns.insert(txn, TxnState { status: Some(status), ..Default::default() });
        }
        self.next_txn = self.next_txn.max(max_txn + 1);
        &self.stable
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn int(v: i64) -> Value {
        Value::Int(v)
    }

    #[test]
    fn uncommitted_write_is_discarded_by_crash() {
        let mut s = Store::new();
        let t1 = s.begin();
        s.write(t1, "x", int(5)).unwrap();
        s.crash();
        assert!(s.recover().get("x").is_none());
    }

    #[test]
    fn committed_write_survives_crash() {
        let mut s = Store::new();
        let t1 = s.begin();
        s.write(t1, "x", int(5)).unwrap();
        s.commit(t1).unwrap();
        s.crash();
        assert_eq!(s.recover().get("x"), Some(&int(5)));
    }

    #[test]
    fn real_entity_cannot_be_written() {
        let mut s = Store::new();
        s.declare("atm", EntityKind::Real);
        let t1 = s.begin();
        assert_eq!(s.write(t1, "atm", int(1)), Err(StoreError::RealEntityWrite("atm".into())));
    }

    #[test]
    fn empty_commit_logs_only_commit_record() {
        let mut s = Store::new();
        let t = s.begin();
        s.commit(t).unwrap();
        assert_eq!(s.log().len(), 1);
        assert_eq!(s.log()[0].kind, RecordKind::Commit);
    }

    #[test]
    fn committed_value_visible_to_later_txn() {
        let mut s = Store::new();
        let t1 = s.begin();
        s.write(t1, "x", int(5)).unwrap();
        s.commit(t1).unwrap();
        let t2 = s.begin();
        assert_eq!(s.read(t2, "x").unwrap(), Some(int(5)));
    }

    #[test]
    fn abort_discards_writes_and_logs_no_updates() {
        let mut s = Store::new();
        let t1 = s.begin();
        s.write(t1, "x", int(5)).unwrap();
        s.abort(t1).unwrap();
        assert!(s.stable().get("x").is_none());
        assert!(s.log().iter().all(|r| r.kind != RecordKind::Update));
        assert_eq!(s.abort(t1), Err(StoreError::TxnAlreadyTerminated(t1)));
    }

    #[test]
    fn abort_cancels_real_action() {
        let mut s = Store::new();
        s.declare("cash", EntityKind::Real);
        let t1 = s.begin();
        s.emit_real(t1, "cash", int(100)).unwrap();
        s.abort(t1).unwrap();
        assert!(s.emitted().is_empty());
        let t2 = s.begin();
        s.emit_real(t2, "cash", int(40)).unwrap();
        assert!(s.emitted().is_empty());
        s.commit(t2).unwrap();
        assert_eq!(s.emitted().len(), 1);
    }

    #[test]
    fn volatile_entities_do_not_survive() {
        let mut s = Store::new();
        s.declare("cache", EntityKind::Volatile);
        let t = s.begin();
        s.write(t, "cache", int(1)).unwrap();
        s.write(t, "x", int(2)).unwrap();
        s.commit(t).unwrap();
        assert_eq!(s.read_committed("cache"), Some(&int(1)));
        s.crash();
        s.recover();
        assert_eq!(s.read_committed("cache"), None);
        assert_eq!(s.read_committed("x"), Some(&int(2)));
    }

    #[test]
    fn recover_empty_log() {
        let mut s = Store::new();
        s.crash();
        assert!(s.recover().is_empty());
    }

    #[test]
    fn checkpoint_requires_quiescence() {
        let mut s = Store::new();
        let t = s.begin();
        s.write(t, "x", int(1)).unwrap();
        assert_eq!(s.checkpoint(), Err(StoreError::NotQuiescent));
        s.commit(t).unwrap();
        assert!(s.checkpoint().is_ok());
    }

    #[test]
    fn checkpoint_then_crash_replays_nothing() {
        let mut s = Store::new();
        let t = s.begin();
        s.write(t, "x", int(1)).unwrap();
        s.commit(t).unwrap();
        let lsn = s.checkpoint().unwrap();
        assert!(s.log().iter().all(|r| r.lsn <= lsn));
        let snap = s.stable().clone();
        s.crash();
        assert_eq!(s.recover(), &snap);
    }

    #[test]
    fn commit_waits_for_dependency() {
        let mut s = Store::new();
        let estimate = s.begin();
        let deposit = s.begin();
        s.write(deposit, "paid", int(1)).unwrap();
        s.add_commit_dependency(deposit, estimate).unwrap();
        assert_eq!(s.commit(deposit).unwrap(), CommitStatus::Waiting);
        assert!(s.stable().get("paid").is_none());
        s.commit(estimate).unwrap();
        assert_eq!(s.status(deposit), Some(TxnStatus::Committed));
        let commits: Vec<TxnId> =
            s.log().iter().filter(|r| r.kind == RecordKind::Commit).map(|r| r.txn).collect();
        assert_eq!(commits, [estimate, deposit]);
    }

    #[test]
    fn aborted_prerequisite_aborts_dependent() {
        let mut s = Store::new();
        let t = s.begin();
        let d = s.begin();
        s.add_commit_dependency(d, t).unwrap();
        s.abort(t).unwrap();
        assert_eq!(s.status(d), Some(TxnStatus::Aborted));
    }

    #[test]
    fn self_and_cyclic_dependencies_rejected() {
        let mut s = Store::new();
        let a = s.begin();
        let b = s.begin();
        assert_eq!(s.add_commit_dependency(a, a), Err(StoreError::CycleDetected));
        s.add_commit_dependency(a, b).unwrap();
        assert_eq!(s.add_commit_dependency(b, a), Err(StoreError::CycleDetected));
    }

    #[test]
    fn torn_commit_is_rolled_back() {
        let mut s = Store::new();
        let t = s.begin();
        s.write(t, "a", int(1)).unwrap();
        s.write(t, "b", int(2)).unwrap();
        s.commit(t).unwrap();
        // keep the first update record only
        s.crash_truncating(1);
        assert!(s.recover().is_empty());
        assert_eq!(s.status(t), Some(TxnStatus::Aborted));
        assert_eq!(s.log().last().unwrap().kind, RecordKind::Abort);
    }
}
