use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use super::{build_conflict_graph, EdgeKind, EventKind, History, HistoryEvent, Outcome};
use crate::types::{table_of, Key, TxnId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Anomaly {
    DirtyRead,
    NonRepeatableRead,
    Phantom,
    DirtyWrite,
    LostUpdate,
    WriteSkew,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum AnsiLevel {
    ReadUncommitted,
    ReadCommitted,
    RepeatableRead,
    AnsiSerializable,
}

/// The highest ANSI level whose three prohibited phenomena are all absent.
pub fn classify_ansi_level(history: &History) -> AnsiLevel {
    let found = detect_anomalies(history);
    if found.contains(&Anomaly::DirtyRead) {
        AnsiLevel::ReadUncommitted
    } else if found.contains(&Anomaly::NonRepeatableRead) {
        AnsiLevel::ReadCommitted
    } else if found.contains(&Anomaly::Phantom) {
        AnsiLevel::RepeatableRead
    } else {
        AnsiLevel::AnsiSerializable
    }
}

struct Ctx<'h> {
    h: &'h History,
    outcomes: BTreeMap<TxnId, Outcome>,
}

impl Ctx<'_> {
    /// Whether `txn` has not terminated at `seq`.
    fn pending_at(&self, txn: TxnId, seq: u64) -> bool {
        match self.outcomes.get(&txn) {
            Some(Outcome::Committed(s) | Outcome::Aborted(s)) => *s > seq,
            _ => true,
        }
    }

    fn committed_between(&self, txn: TxnId, lo: u64, hi: u64) -> bool {
        matches!(self.outcomes.get(&txn), Some(Outcome::Committed(s)) if *s > lo && *s < hi)
    }

    fn committed(&self, txn: TxnId) -> bool {
        matches!(self.outcomes.get(&txn), Some(Outcome::Committed(_)))
    }

    /// The latest write by another transaction, before `seq`, that put
    /// `value` into `key`.
    fn source_of(&self, reader: TxnId, key: &str, value: Option<&crate::Value>, seq: u64) -> Option<&HistoryEvent> {
        self.h
            .events
            .iter()
            .take_while(|e| e.seq < seq)
            .filter(|e| e.is_write() && e.key() == Some(key) && e.installed().as_ref() == value)
            .last()
            .filter(|e| e.txn != reader)
    }

    fn writes_between(&self, txn: TxnId, key_pred: &dyn Fn(&str) -> bool, lo: u64, hi: u64) -> bool {
        self.h.events.iter().any(|e| e.txn == txn && e.is_write() && e.seq > lo && e.seq < hi && key_pred(e.key().unwrap_or("")))
    }

    /// Some other transaction wrote a matching key and committed strictly between.
    fn intervening_commit(&self, reader: TxnId, key_pred: &dyn Fn(&str) -> bool, lo: u64, hi: u64) -> bool {
        self.h
            .events
            .iter()
            .filter(|e| e.txn != reader && e.is_write() && key_pred(e.key().unwrap_or("")))
            .any(|e| self.committed_between(e.txn, lo, hi))
    }

    fn dirty_read(&self) -> bool {
        self.h.events.iter().any(|e| match e.kind {
            EventKind::Read => {
                let src = self.source_of(e.txn, e.key().unwrap_or(""), e.value.as_ref(), e.seq);
                src.is_some_and(|w| self.pending_at(w.txn, e.seq))
            }
            EventKind::PredicateRead => e.observed_rows().iter().any(|(k, row)| {
                self.source_of(e.txn, k, Some(row), e.seq).is_some_and(|w| self.pending_at(w.txn, e.seq))
            }),
            _ => false,
        })
    }

    fn dirty_write(&self) -> bool {
        let writes: Vec<&HistoryEvent> = self.h.events.iter().filter(|e| e.is_write()).collect();
        writes.iter().enumerate().any(|(i, w2)| {
            writes[..i].iter().any(|w1| w1.txn != w2.txn && w1.key() == w2.key() && self.pending_at(w1.txn, w2.seq))
        })
    }

    fn non_repeatable_read(&self) -> bool {
        let mut reads: BTreeMap<(TxnId, &str), Vec<&HistoryEvent>> = BTreeMap::new();
        for e in self.h.events.iter().filter(|e| e.kind == EventKind::Read) {
            reads.entry((e.txn, e.key().unwrap_or(""))).or_default().push(e);
        }
        reads.iter().any(|((txn, key), rs)| {
            rs.windows(2).any(|w| {
                let same_key = |k: &str| k == *key;
                w[0].value != w[1].value
                    && !self.writes_between(*txn, &same_key, w[0].seq, w[1].seq)
                    && self.intervening_commit(*txn, &same_key, w[0].seq, w[1].seq)
            })
        })
    }

    fn phantom(&self) -> bool {
        let mut reads: BTreeMap<(TxnId, &crate::lock::Predicate), Vec<&HistoryEvent>> = BTreeMap::new();
        for e in self.h.events.iter().filter(|e| e.kind == EventKind::PredicateRead) {
            reads.entry((e.txn, e.predicate().expect("predicate read"))).or_default().push(e);
        }
        reads.iter().any(|((txn, pred), rs)| {
            rs.windows(2).any(|w| {
                let in_table = |k: &str| table_of(k) == pred.table;
                let ids = |e: &HistoryEvent| e.observed_rows().into_keys().collect::<BTreeSet<Key>>();
                ids(w[0]) != ids(w[1])
                    && !self.writes_between(*txn, &in_table, w[0].seq, w[1].seq)
                    && self.intervening_commit(*txn, &in_table, w[0].seq, w[1].seq)
            })
        })
    }

    fn lost_update(&self) -> bool {
        let committed: Vec<TxnId> = self.h.committed();
        // first read and first write per (txn, key)
        let mut first_read: BTreeMap<(TxnId, &str), u64> = BTreeMap::new();
        let mut first_write: BTreeMap<(TxnId, &str), u64> = BTreeMap::new();
        for e in &self.h.events {
            let Some(k) = e.key() else { continue };
            if e.kind == EventKind::Read {
                first_read.entry((e.txn, k)).or_insert(e.seq);
            } else if e.is_write() {
                first_write.entry((e.txn, k)).or_insert(e.seq);
            }
        }
        first_write.keys().any(|&(a, k)| {
            committed.contains(&a)
                && committed.iter().any(|&b| {
                    if b <= a {
                        return false;
                    }
                    let (Some(ra), Some(rb), Some(wa), Some(wb)) =
                        (first_read.get(&(a, k)), first_read.get(&(b, k)), first_write.get(&(a, k)), first_write.get(&(b, k)))
                    else {
                        return false;
                    };
                    let first_w = (*wa).min(*wb);
                    *ra < first_w && *rb < first_w
                })
        })
    }

    fn write_skew(&self) -> bool {
        let Ok(g) = build_conflict_graph(self.h) else { return false };
        let write_set = |t: TxnId| -> BTreeSet<&str> { self.h.events_of(t).filter(|e| e.is_write()).filter_map(|e| e.key()).collect() };
        g.edges.iter().any(|&(a, b, kind)| {
            kind == EdgeKind::RW
                && a < b
                && g.has_edge(b, a, EdgeKind::RW)
                && self.committed(a)
                && self.committed(b)
                && write_set(a).is_disjoint(&write_set(b))
        })
    }
}

/// Which anomalies the history exhibits. Aborted transactions count for dirty
/// reads and dirty writes, which are about uncommitted data.
pub fn detect_anomalies(history: &History) -> BTreeSet<Anomaly> {
    let ctx = Ctx { h: history, outcomes: history.outcomes() };
    let checks = [
        (Anomaly::DirtyRead, ctx.dirty_read()),
        (Anomaly::NonRepeatableRead, ctx.non_repeatable_read()),
        (Anomaly::Phantom, ctx.phantom()),
        (Anomaly::DirtyWrite, ctx.dirty_write()),
        (Anomaly::LostUpdate, ctx.lost_update()),
        (Anomaly::WriteSkew, ctx.write_skew()),
    ];
    checks.into_iter().filter(|(_, hit)| *hit).map(|(a, _)| a).collect()
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;
    use crate::types::Value;

    fn set(xs: &[Anomaly]) -> BTreeSet<Anomaly> {
        xs.iter().copied().collect()
    }

    #[test]
    fn clean_serial() {
        assert!(detect_anomalies(&serial_two()).is_empty());
        assert_eq!(classify_ansi_level(&serial_two()), AnsiLevel::AnsiSerializable);
    }

    #[test]
    fn write_skew_is_ansi_serializable() {
        let h = write_skew();
        assert_eq!(detect_anomalies(&h), set(&[Anomaly::WriteSkew]));
        assert_eq!(classify_ansi_level(&h), AnsiLevel::AnsiSerializable);
    }

    #[test]
    fn dirty_read() {
        let mut h = History::new();
        h.load([("x".into(), Value::Int(0))]);
        h.begin(t(1));
        h.write(t(1), "x", Value::Int(1));
        h.begin(t(2));
        h.read(t(2), "x", Some(Value::Int(1)));
        h.commit(t(2));
        h.commit(t(1));
        assert_eq!(detect_anomalies(&h), set(&[Anomaly::DirtyRead]));
        assert_eq!(classify_ansi_level(&h), AnsiLevel::ReadUncommitted);
    }

    #[test]
    fn non_repeatable_read() {
        let mut h = History::new();
        h.load([("x".into(), Value::Int(0))]);
        h.begin(t(1));
        h.read(t(1), "x", Some(Value::Int(0)));
        h.begin(t(2));
        h.write(t(2), "x", Value::Int(5));
        h.commit(t(2));
        h.read(t(1), "x", Some(Value::Int(5)));
        h.commit(t(1));
        assert_eq!(detect_anomalies(&h), set(&[Anomaly::NonRepeatableRead]));
        assert_eq!(classify_ansi_level(&h), AnsiLevel::ReadCommitted);
    }

    #[test]
    fn phantom_needs_repeated_predicate_read() {
        let mut h = napa_phantom();
        assert!(!detect_anomalies(&h).contains(&Anomaly::Phantom));
        // second scan by the auditor, before its commit
        h.events.pop();
        h.predicate_read(t(1), napa_pred(), [("Accounts/1".into(), acct("Napa", 100)), ("Accounts/3".into(), acct("Napa", 30))].into());
        h.commit(t(1));
        assert!(detect_anomalies(&h).contains(&Anomaly::Phantom));
        assert_eq!(classify_ansi_level(&h), AnsiLevel::RepeatableRead);
    }

    #[test]
    fn dirty_write_and_lost_update() {
        let mut h = History::new();
        h.load([("x".into(), Value::Int(0))]);
        h.begin(t(1));
        h.begin(t(2));
        h.read(t(1), "x", Some(Value::Int(0)));
        h.read(t(2), "x", Some(Value::Int(0)));
        h.write(t(1), "x", Value::Int(1));
        h.write(t(2), "x", Value::Int(2));
        h.commit(t(1));
        h.commit(t(2));
        let found = detect_anomalies(&h);
        assert!(found.contains(&Anomaly::DirtyWrite));
        assert!(found.contains(&Anomaly::LostUpdate));
    }
}
