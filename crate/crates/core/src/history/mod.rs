//! Execution histories and the oracles that judge them.
//!
//! A [`History`] is the ordered event stream an engine produced. Transaction
//! `T0` is reserved for loading the initial state: its writes form the first
//! version of every key and it takes no part in any verdict.

mod anomaly;
mod graph;
mod oracle;

pub use anomaly::{classify_ansi_level, detect_anomalies, AnsiLevel, Anomaly};
pub use graph::{build_conflict_graph, is_serializable, ConflictGraph, EdgeKind};
pub use oracle::serial_oracle;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::lock::Predicate;
use crate::types::{table_of, Key, TxnId, Value};

/// The transaction whose writes form the initial state.
pub const LOADER: TxnId = TxnId(0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub enum EventKind {
    Begin,
    Read,
    Write,
    Insert,
    Delete,
    PredicateRead,
    Commit,
    Abort,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(untagged))]
pub enum Item {
    Key(Key),
    Predicate(Predicate),
}

/// One step of an execution.
///
/// `value` is what a `Read` observed (`None` for absent), what a `Write` or
/// `Insert` stored, or the before-image of a `Delete`. A `PredicateRead`
/// observes a `Record` mapping each qualifying key to its row.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HistoryEvent {
    pub seq: u64,
    pub txn: TxnId,
    pub kind: EventKind,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub item: Option<Item>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub value: Option<Value>,
}

impl HistoryEvent {
    pub fn key(&self) -> Option<&str> {
        match &self.item {
            Some(Item::Key(k)) => Some(k),
            _ => None,
        }
    }

    pub fn predicate(&self) -> Option<&Predicate> {
        match &self.item {
            Some(Item::Predicate(p)) => Some(p),
            _ => None,
        }
    }

    pub fn is_write(&self) -> bool {
        matches!(self.kind, EventKind::Write | EventKind::Insert | EventKind::Delete)
    }

    /// The value this event leaves behind if it is a write.
    pub fn installed(&self) -> Option<Value> {
        match self.kind {
            EventKind::Delete => None,
            _ => self.value.clone(),
        }
    }

    /// Observed row set of a predicate read.
    pub fn observed_rows(&self) -> BTreeMap<Key, Value> {
        match &self.value {
            Some(Value::Record(rows)) => rows.clone(),
            _ => BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum HistoryError {
    #[error("malformed history at seq {seq}: {reason}")]
    MalformedHistory { seq: u64, reason: &'static str },
    #[error("{0} committed transactions exceed the brute-force limit")]
    TooLarge(usize),
}

/// Terminal status of a transaction within a history.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Committed(u64),
    Aborted(u64),
    InFlight,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct History {
    pub events: Vec<HistoryEvent>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_events(events: Vec<HistoryEvent>) -> Self {
        History { events }
    }

    /// Appends an event with the next sequence number.
    pub fn push(&mut self, txn: TxnId, kind: EventKind, item: Option<Item>, value: Option<Value>) {
        let seq = self.events.last().map_or(1, |e| e.seq + 1);
        self.events.push(HistoryEvent { seq, txn, kind, item, value });
    }

    /// Records the initial state as a committed loader transaction.
    pub fn load<I: IntoIterator<Item = (Key, Value)>>(&mut self, rows: I) {
        self.push(LOADER, EventKind::Begin, None, None);
        for (k, v) in rows {
            self.push(LOADER, EventKind::Insert, Some(Item::Key(k)), Some(v));
        }
        self.push(LOADER, EventKind::Commit, None, None);
    }

    pub fn begin(&mut self, txn: TxnId) {
        self.push(txn, EventKind::Begin, None, None);
    }

    pub fn read(&mut self, txn: TxnId, key: impl Into<Key>, seen: Option<Value>) {
        self.push(txn, EventKind::Read, Some(Item::Key(key.into())), seen);
    }

    pub fn write(&mut self, txn: TxnId, key: impl Into<Key>, value: Value) {
        self.push(txn, EventKind::Write, Some(Item::Key(key.into())), Some(value));
    }

    pub fn insert(&mut self, txn: TxnId, key: impl Into<Key>, value: Value) {
        self.push(txn, EventKind::Insert, Some(Item::Key(key.into())), Some(value));
    }

    pub fn delete(&mut self, txn: TxnId, key: impl Into<Key>, before: Option<Value>) {
        self.push(txn, EventKind::Delete, Some(Item::Key(key.into())), before);
    }

    pub fn predicate_read(&mut self, txn: TxnId, pred: Predicate, rows: BTreeMap<Key, Value>) {
        self.push(txn, EventKind::PredicateRead, Some(Item::Predicate(pred)), Some(Value::Record(rows)));
    }

    pub fn commit(&mut self, txn: TxnId) {
        self.push(txn, EventKind::Commit, None, None);
    }

    pub fn abort(&mut self, txn: TxnId) {
        self.push(txn, EventKind::Abort, None, None);
    }

    /// Checks ordering and per-transaction shape: `Begin` first, nothing after
    /// a terminal event, operations carry the right kind of item.
    pub fn validate(&self) -> Result<(), HistoryError> {
        let bad = |seq, reason| Err(HistoryError::MalformedHistory { seq, reason });
        let mut last_seq = None;
        let mut state: BTreeMap<TxnId, bool> = BTreeMap::new(); // txn -> terminated
        for e in &self.events {
            if last_seq.is_some_and(|s| e.seq <= s) {
                return bad(e.seq, "sequence numbers must increase");
            }
            last_seq = Some(e.seq);
            match (e.kind, state.get(&e.txn)) {
                (EventKind::Begin, None) => {
                    state.insert(e.txn, false);
                }
                (EventKind::Begin, Some(_)) => return bad(e.seq, "transaction begins twice"),
                (_, None) => return bad(e.seq, "operation before begin"),
                (_, Some(true)) => return bad(e.seq, "operation after commit or abort"),
                (EventKind::Commit | EventKind::Abort, Some(false)) => {
                    state.insert(e.txn, true);
                }
                (EventKind::PredicateRead, _) => {
                    if e.predicate().is_none() {
                        return bad(e.seq, "predicate read without a predicate");
                    }
                }
                (_, _) => {
                    if e.key().is_none() {
                        return bad(e.seq, "operation without a key");
                    }
                }
            }
        }
        Ok(())
    }

    pub fn outcomes(&self) -> BTreeMap<TxnId, Outcome> {
        let mut out = BTreeMap::new();
        for e in &self.events {
            let o = out.entry(e.txn).or_insert(Outcome::InFlight);
            match e.kind {
                EventKind::Commit => *o = Outcome::Committed(e.seq),
                EventKind::Abort => *o = Outcome::Aborted(e.seq),
                _ => {}
            }
        }
        out
    }

    /// Committed transactions other than the loader, in commit order.
    pub fn committed(&self) -> Vec<TxnId> {
        self.events.iter().filter(|e| e.kind == EventKind::Commit && e.txn != LOADER).map(|e| e.txn).collect()
    }

    pub fn initial_state(&self) -> BTreeMap<Key, Value> {
        let mut state = BTreeMap::new();
        if matches!(self.outcomes().get(&LOADER), Some(Outcome::Committed(_))) {
            apply_writes(&mut state, self.events.iter().filter(|e| e.txn == LOADER));
        }
        state
    }

    /// State after installing every committed transaction's writes in commit order.
    pub fn final_state(&self) -> BTreeMap<Key, Value> {
        let mut state = self.initial_state();
        for t in self.committed() {
            apply_writes(&mut state, self.events.iter().filter(|e| e.txn == t));
        }
        state
    }

    /// Per key, the committed versions in version (commit) order. The first
    /// entry of each chain is the loader's, possibly absent. Each entry holds
    /// the writer, the installed value and the seq of the writer's last write.
    pub(crate) fn version_chains(&self) -> BTreeMap<Key, Vec<VersionEntry>> {
        let mut chains: BTreeMap<Key, Vec<VersionEntry>> = BTreeMap::new();
        let initial = self.initial_state();
        let loader_seq = |k: &str| {
            self.events.iter().filter(|e| e.txn == LOADER && e.key() == Some(k)).map(|e| e.seq).next_back().unwrap_or(0)
        };
        for t in core::iter::once(LOADER).chain(self.committed()) {
            if t == LOADER && !initial.is_empty() {
                for (k, v) in &initial {
                    chains.insert(k.clone(), alloc::vec![VersionEntry { writer: LOADER, value: Some(v.clone()), seq: loader_seq(k) }]);
                }
                continue;
            }
            let mut last: BTreeMap<&str, &HistoryEvent> = BTreeMap::new();
            for e in self.events.iter().filter(|e| e.txn == t && e.is_write()) {
                last.insert(e.key().expect("writes carry keys"), e);
            }
            for (k, e) in last {
                let chain = chains
                    .entry(String::from(k))
                    .or_insert_with(|| alloc::vec![VersionEntry { writer: LOADER, value: None, seq: 0 }]);
                chain.push(VersionEntry { writer: t, value: e.installed(), seq: e.seq });
            }
        }
        chains
    }

    /// Every key of `table` mentioned anywhere in the history.
    pub(crate) fn keys_of_table(&self, table: &str) -> BTreeSet<Key> {
        let mut keys = BTreeSet::new();
        for e in &self.events {
            if let Some(k) = e.key() {
                if table_of(k) == table {
                    keys.insert(String::from(k));
                }
            }
            if e.kind == EventKind::PredicateRead {
                keys.extend(e.observed_rows().into_keys().filter(|k| table_of(k) == table));
            }
        }
        keys
    }

    pub fn events_of(&self, txn: TxnId) -> impl Iterator<Item = &HistoryEvent> + '_ {
        self.events.iter().filter(move |e| e.txn == txn)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct VersionEntry {
    pub writer: TxnId,
    pub value: Option<Value>,
    pub seq: u64,
}

pub(crate) fn apply_writes<'a>(state: &mut BTreeMap<Key, Value>, events: impl Iterator<Item = &'a HistoryEvent>) {
    for e in events.filter(|e| e.is_write()) {
        let k = String::from(e.key().expect("writes carry keys"));
        match e.installed() {
            Some(v) => state.insert(k, v),
            None => state.remove(&k),
        };
    }
}

/// Rows of `state` that satisfy `pred`.
pub(crate) fn select(state: &BTreeMap<Key, Value>, pred: &Predicate) -> BTreeMap<Key, Value> {
    state.iter().filter(|(k, v)| table_of(k) == pred.table && pred.matches(v)).map(|(k, v)| (k.clone(), v.clone())).collect()
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::lock::Interval;

    pub fn t(n: u64) -> TxnId {
        TxnId(n)
    }

    pub fn serial_two() -> History {
        let mut h = History::new();
        h.load([("x".into(), Value::Int(0))]);
        h.begin(t(1));
        h.read(t(1), "x", Some(Value::Int(0)));
        h.write(t(1), "x", Value::Int(1));
        h.commit(t(1));
        h.begin(t(2));
        h.read(t(2), "x", Some(Value::Int(1)));
        h.write(t(2), "x", Value::Int(2));
        h.commit(t(2));
        h
    }

    pub fn write_skew() -> History {
        let mut h = History::new();
        h.load([("x".into(), Value::Int(50)), ("y".into(), Value::Int(50))]);
        h.begin(t(1));
        h.begin(t(2));
        for tx in [t(1), t(2)] {
            h.read(tx, "x", Some(Value::Int(50)));
            h.read(tx, "y", Some(Value::Int(50)));
        }
        h.write(t(1), "x", Value::Int(-40));
        h.write(t(2), "y", Value::Int(-41));
        h.commit(t(1));
        h.commit(t(2));
        h
    }

    pub fn napa_pred() -> Predicate {
        Predicate::all("Accounts", [("Location", Interval::exactly("Napa"))])
    }

    pub fn acct(loc: &str, bal: i64) -> Value {
        Value::record([("Location", Value::from(loc)), ("Balance", Value::Int(bal))])
    }

    /// Auditor sums Napa balances and then reads the stored total, while an
    /// inserter adds a Napa account and bumps the total in between.
    pub fn napa_phantom() -> History {
        let mut h = History::new();
        h.load([
            ("Accounts/1".into(), acct("Napa", 100)),
            ("Accounts/2".into(), acct("Sonoma", 50)),
            ("Assets/Napa".into(), Value::Int(100)),
        ]);
        h.begin(t(1));
        h.predicate_read(t(1), napa_pred(), [("Accounts/1".into(), acct("Napa", 100))].into());
        h.begin(t(2));
        h.insert(t(2), "Accounts/3", acct("Napa", 30));
        h.read(t(2), "Assets/Napa", Some(Value::Int(100)));
        h.write(t(2), "Assets/Napa", Value::Int(130));
        h.commit(t(2));
        h.read(t(1), "Assets/Napa", Some(Value::Int(130)));
        h.commit(t(1));
        h
    }
}
