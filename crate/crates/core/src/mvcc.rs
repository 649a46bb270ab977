//! Multiversion storage with snapshot isolation.
//!
//! Every committed write appends a version stamped with its writer's commit
//! timestamp. A transaction reads the newest version no later than its start
//! timestamp, buffers its own writes, and at commit is aborted if another
//! transaction committed a write to the same key after it started
//! (first-writer-wins).

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::types::{Key, TxnId, Value};

pub type Ts = u64;

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Version {
    pub ts: Ts,
    /// `None` is a tombstone.
    pub value: Option<Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiState {
    Active,
    Committed(Ts),
    Aborted,
}

#[derive(Clone, Debug)]
struct SiTxn {
    start: Ts,
    writes: BTreeMap<Key, Option<Value>>,
    state: SiState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiCommit {
    Committed(Ts),
    /// Another transaction committed a write to one of our keys after we started.
    FirstWriterWins,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SiError {
    #[error("{0} is not active")]
    TxnNotActive(TxnId),
}

#[derive(Clone, Debug, Default)]
pub struct SiStore {
    versions: BTreeMap<Key, Vec<Version>>,
    txns: BTreeMap<TxnId, SiTxn>,
    last_ts: Ts,
    next_txn: u64,
}

impl SiStore {
    pub fn new() -> Self {
        SiStore { next_txn: 1, ..Default::default() }
    }

    /// Installs initial state at timestamp 0, outside any transaction.
    pub fn load<I: IntoIterator<Item = (Key, Value)>>(&mut self, rows: I) {
        for (k, v) in rows {
            self.versions.insert(k, alloc::vec![Version { ts: 0, value: Some(v) }]);
        }
    }

    pub fn latest_ts(&self) -> Ts {
        self.last_ts
    }

    pub fn begin(&mut self) -> TxnId {
        let id = TxnId(self.next_txn);
        self.next_txn += 1;
        self.begin_as(id);
        id
    }

    /// Begins with a caller-chosen id (used when ids come from a shared counter).
    pub fn begin_as(&mut self, id: TxnId) {
        self.next_txn = self.next_txn.max(id.0 + 1);
        self.txns.insert(id, SiTxn { start: self.last_ts, writes: BTreeMap::new(), state: SiState::Active });
    }

    pub fn start_ts(&self, txn: TxnId) -> Option<Ts> {
        self.txns.get(&txn).map(|t| t.start)
    }

    pub fn state(&self, txn: TxnId) -> Option<SiState> {
        self.txns.get(&txn).map(|t| t.state)
    }

    fn active(&self, txn: TxnId) -> Result<&SiTxn, SiError> {
        match self.txns.get(&txn) {
            Some(t) if t.state == SiState::Active => Ok(t),
            _ => Err(SiError::TxnNotActive(txn)),
        }
    }

    /// Newest committed value of `key` at or before `ts`.
    pub fn read_at(&self, key: &str, ts: Ts) -> Option<&Value> {
        let chain = self.versions.get(key)?;
        let idx = chain.partition_point(|v| v.ts <= ts);
        chain[..idx].last()?.value.as_ref()
    }

    pub fn read(&self, txn: TxnId, key: &str) -> Result<Option<Value>, SiError> {
        let t = self.active(txn)?;
        if let Some(own) = t.writes.get(key) {
            return Ok(own.clone());
        }
        Ok(self.read_at(key, t.start).cloned())
    }

    /// Whole-table scan: every visible key with the given `table/` prefix.
    pub fn scan(&self, txn: TxnId, table: &str) -> Result<BTreeMap<Key, Value>, SiError> {
        let t = self.active(txn)?;
        let mut out: BTreeMap<Key, Value> = self
            .versions
            .keys()
            .filter(|k| crate::types::table_of(k) == table)
            .filter_map(|k| self.read_at(k, t.start).map(|v| (k.clone(), v.clone())))
            .collect();
        for (k, v) in &t.writes {
            if crate::types::table_of(k) == table {
                match v {
                    Some(v) => out.insert(k.clone(), v.clone()),
                    None => out.remove(k),
                };
            }
        }
        Ok(out)
    }

    pub fn write(&mut self, txn: TxnId, key: impl Into<Key>, value: Value) -> Result<(), SiError> {
        self.active(txn)?;
        self.txns.get_mut(&txn).expect("active").writes.insert(key.into(), Some(value));
        Ok(())
    }

    pub fn delete(&mut self, txn: TxnId, key: impl Into<Key>) -> Result<(), SiError> {
        self.active(txn)?;
        self.txns.get_mut(&txn).expect("active").writes.insert(key.into(), None);
        Ok(())
    }

    pub fn write_set(&self, txn: TxnId) -> Vec<Key> {
        self.txns.get(&txn).map_or_else(Vec::new, |t| t.writes.keys().cloned().collect())
    }

    /// Validates and publishes in one step.
    pub fn commit(&mut self, txn: TxnId) -> Result<SiCommit, SiError> {
        let t = self.active(txn)?;
        let conflict = t
            .writes
            .keys()
            .any(|k| self.versions.get(k).and_then(|c| c.last()).is_some_and(|v| v.ts > t.start));
        if conflict {
            self.txns.get_mut(&txn).expect("active").state = SiState::Aborted;
            return Ok(SiCommit::FirstWriterWins);
        }
        // read-only transactions also take a fresh timestamp but publish nothing
        let t = self.txns.get_mut(&txn).expect("active");
        self.last_ts += 1;
        let ts = self.last_ts;
        t.state = SiState::Committed(ts);
        for (k, v) in core::mem::take(&mut t.writes) {
            self.versions.entry(k).or_default().push(Version { ts, value: v });
        }
        Ok(SiCommit::Committed(ts))
    }

    pub fn abort(&mut self, txn: TxnId) -> Result<(), SiError> {
        self.active(txn)?;
        let t = self.txns.get_mut(&txn).expect("active");
        t.writes.clear();
        t.state = SiState::Aborted;
        Ok(())
    }

    /// The whole database as of `ts`.
    pub fn consistent_read_at(&self, ts: Ts) -> BTreeMap<Key, Value> {
        self.versions.keys().filter_map(|k| self.read_at(k, ts).map(|v| (k.clone(), v.clone()))).collect()
    }

    pub fn versions(&self) -> &BTreeMap<Key, Vec<Version>> {
        &self.versions
    }

    /// Drops versions superseded before `before`, keeping the newest one at or
    /// below it so reads at `before` are unchanged.
    pub fn prune(&mut self, before: Ts) {
        for chain in self.versions.values_mut() {
            let idx = chain.partition_point(|v| v.ts <= before);
            if idx > 1 {
                chain.drain(..idx - 1);
            }
        }
        self.versions.retain(|_, c| !(c.len() == 1 && c[0].value.is_none() && c[0].ts <= before));
    }
}
