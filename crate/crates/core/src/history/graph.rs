use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use super::{EventKind, History, HistoryError, HistoryEvent, VersionEntry, LOADER};
use crate::lock::Predicate;
use crate::types::{Key, TxnId, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum EdgeKind {
    WW,
    WR,
    RW,
}

/// Dependency graph over committed transactions.
///
/// Reads are matched to the committed version they observed by value, and
/// versions of a key are ordered by their writers' commit order. A read whose
/// observation no committed version explains (an aborted or intermediate
/// value) is listed in `unexplained`, which alone makes the history
/// non-serializable.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConflictGraph {
    pub nodes: BTreeSet<TxnId>,
    pub edges: BTreeSet<(TxnId, TxnId, EdgeKind)>,
    pub unexplained: Vec<u64>,
}

impl ConflictGraph {
    pub fn successors(&self) -> BTreeMap<TxnId, BTreeSet<TxnId>> {
        let mut g: BTreeMap<TxnId, BTreeSet<TxnId>> = self.nodes.iter().map(|n| (*n, BTreeSet::new())).collect();
        for (a, b, _) in &self.edges {
            g.entry(*a).or_default().insert(*b);
        }
        g
    }

    pub fn has_edge(&self, from: TxnId, to: TxnId, kind: EdgeKind) -> bool {
        self.edges.contains(&(from, to, kind))
    }

    pub fn find_cycle(&self) -> Option<Vec<TxnId>> {
        crate::lock::cycle_in(&self.successors())
    }

    /// A serial order consistent with every edge, if one exists.
    pub fn topological_order(&self) -> Option<Vec<TxnId>> {
        let g = self.successors();
        let mut indeg: BTreeMap<TxnId, usize> = g.keys().map(|n| (*n, 0)).collect();
        for succ in g.values() {
            for s in succ {
                *indeg.entry(*s).or_default() += 1;
            }
        }
        let mut ready: BTreeSet<TxnId> = indeg.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
        let mut order = Vec::new();
        while let Some(n) = ready.pop_first() {
            order.push(n);
            for s in &g[&n] {
                let d = indeg.get_mut(s).expect("node");
                *d -= 1;
                if *d == 0 {
                    ready.insert(*s);
                }
            }
        }
        (order.len() == g.len()).then_some(order)
    }
}

/// What a read saw for one key, projected through `obs`.
fn project(obs: &dyn Fn(&Key, Option<&Value>) -> Option<Value>, k: &Key, v: Option<&Value>) -> Option<Value> {
    obs(k, v)
}

struct Builder<'h> {
    history: &'h History,
    chains: BTreeMap<Key, Vec<VersionEntry>>,
    graph: ConflictGraph,
}

impl Builder<'_> {
    fn edge(&mut self, from: TxnId, to: TxnId, kind: EdgeKind) {
        if from != to && from != LOADER && to != LOADER {
            self.graph.edges.insert((from, to, kind));
        }
    }

    /// Links `reader`'s observation of `key` at `seq` to the version run that
    /// explains it.
    fn resolve(&mut self, reader: TxnId, seq: u64, key: &Key, seen: Option<Value>, obs: &dyn Fn(&Key, Option<&Value>) -> Option<Value>) {
        let own = self
            .history
            .events_of(reader)
            .filter(|e| e.seq < seq && e.is_write() && e.key() == Some(key.as_str()))
            .last();
        if let Some(w) = own {
            if project(obs, key, w.installed().as_ref()) != seen {
                self.graph.unexplained.push(seq);
            }
            return;
        }
        let absent = [VersionEntry { writer: LOADER, value: None, seq: 0 }];
        let chain: &[VersionEntry] = self.chains.get(key).map_or(&absent[..], |c| &c[..]);
        let obs_at: Vec<Option<Value>> = chain.iter().map(|v| project(obs, key, v.value.as_ref())).collect();
        let matching: Vec<usize> = (0..chain.len()).filter(|i| obs_at[*i] == seen).collect();
        let Some(&first) = matching.first() else {
            self.graph.unexplained.push(seq);
            return;
        };
        // prefer the version most recently written before the read
        let pick = matching.iter().copied().filter(|i| chain[*i].seq < seq).max_by_key(|i| chain[*i].seq).unwrap_or(first);
        let mut start = pick;
        while start > 0 && obs_at[start - 1] == seen {
            start -= 1;
        }
        let mut end = pick;
        while end + 1 < chain.len() && obs_at[end + 1] == seen {
            end += 1;
        }
        let (from, next) = (chain[start].writer, chain.get(end + 1).map(|v| v.writer));
        self.edge(from, reader, EdgeKind::WR);
        if let Some(next) = next {
            self.edge(reader, next, EdgeKind::RW);
        }
    }

    fn read_event(&mut self, e: &HistoryEvent) {
        match e.kind {
            EventKind::Read => {
                let key: Key = e.key().expect("validated").into();
                self.resolve(e.txn, e.seq, &key, e.value.clone(), &|_, v| v.cloned());
            }
            EventKind::PredicateRead => {
                let pred: Predicate = e.predicate().expect("validated").clone();
                let rows = e.observed_rows();
                for key in self.history.keys_of_table(&pred.table) {
                    let seen = rows.get(&key).cloned();
                    self.resolve(e.txn, e.seq, &key, seen, &|_, v| v.filter(|v| pred.matches(v)).cloned());
                }
            }
            _ => {}
        }
    }
}

pub fn build_conflict_graph(history: &History) -> Result<ConflictGraph, HistoryError> {
    history.validate()?;
    let committed = history.committed();
    let mut b = Builder { history, chains: history.version_chains(), graph: ConflictGraph::default() };
    b.graph.nodes = committed.iter().copied().collect();
    let chains = b.chains.clone();
    for chain in chains.values() {
        for (i, a) in chain.iter().enumerate() {
            for later in &chain[i + 1..] {
                b.edge(a.writer, later.writer, EdgeKind::WW);
            }
        }
    }
    let set: BTreeSet<TxnId> = b.graph.nodes.clone();
    for e in history.events.iter().filter(|e| set.contains(&e.txn)) {
        b.read_event(e);
    }
    Ok(b.graph)
}

/// Acyclic dependency graph and every committed read explained.
pub fn is_serializable(history: &History) -> Result<bool, HistoryError> {
    let g = build_conflict_graph(history)?;
    Ok(g.unexplained.is_empty() && g.find_cycle().is_none())
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;
    use crate::types::Value;

    #[test]
    fn single_txn_has_no_edges() {
        let mut h = History::new();
        h.begin(t(1));
        h.write(t(1), "x", Value::Int(1));
        h.commit(t(1));
        let g = build_conflict_graph(&h).unwrap();
        assert!(g.edges.is_empty());
        assert!(is_serializable(&h).unwrap());
    }

    #[test]
    fn write_then_read_is_wr() {
        let mut h = History::new();
        h.begin(t(1));
        h.write(t(1), "x", Value::Int(1));
        h.commit(t(1));
        h.begin(t(2));
        h.read(t(2), "x", Some(Value::Int(1)));
        h.commit(t(2));
        let g = build_conflict_graph(&h).unwrap();
        assert!(g.has_edge(t(1), t(2), EdgeKind::WR));
    }

    #[test]
    fn serial_history_is_serializable() {
        assert!(is_serializable(&serial_two()).unwrap());
        let g = build_conflict_graph(&serial_two()).unwrap();
        assert_eq!(g.topological_order().unwrap(), [t(1), t(2)]);
    }

    #[test]
    fn write_skew_cycle() {
        let g = build_conflict_graph(&write_skew()).unwrap();
        assert!(g.has_edge(t(1), t(2), EdgeKind::RW));
        assert!(g.has_edge(t(2), t(1), EdgeKind::RW));
        assert!(!is_serializable(&write_skew()).unwrap());
    }

    #[test]
    fn napa_phantom_not_serializable() {
        let g = build_conflict_graph(&napa_phantom()).unwrap();
        assert!(g.has_edge(t(1), t(2), EdgeKind::RW));
        assert!(g.has_edge(t(2), t(1), EdgeKind::WR));
        assert!(!is_serializable(&napa_phantom()).unwrap());
    }

    #[test]
    fn reading_aborted_data_is_unexplained() {
        let mut h = History::new();
        h.load([("x".into(), Value::Int(0))]);
        h.begin(t(1));
        h.write(t(1), "x", Value::Int(7));
        h.begin(t(2));
        h.read(t(2), "x", Some(Value::Int(7)));
        h.abort(t(1));
        h.commit(t(2));
        let g = build_conflict_graph(&h).unwrap();
        assert_eq!(g.unexplained.len(), 1);
        assert!(!is_serializable(&h).unwrap());
    }

    #[test]
    fn aborted_txns_are_not_nodes() {
        let mut h = write_skew();
        h.begin(t(3));
        h.write(t(3), "x", Value::Int(9));
        h.abort(t(3));
        assert!(!build_conflict_graph(&h).unwrap().nodes.contains(&t(3)));
    }
}
