//! Small scripted runs that show a single effect each.

use alloc::collections::BTreeMap;
use alloc::vec;

use super::{run_script, Arrival, NodeState, ReplicaWrite, ReplicationConfig, ReplicationRun, Strategy};
use crate::history::{is_serializable, History};
use crate::types::{TxnId, Value};

/// Two nodes, each running a transaction that updates the same item `X`
/// at the same moment under eager update-everywhere. Each holds its local
/// copy and waits for the other's.
pub fn eager_deadlock_demo() -> ReplicationRun {
    let cfg = ReplicationConfig {
        strategy: Strategy::EagerEverywhere,
        nodes: 2,
        ops_per_txn: 1,
        db_size: 1,
        duration: 1,
        ..Default::default()
    };
    let script = vec![Arrival { tick: 0, origin: 0, items: vec![0] }, Arrival { tick: 0, origin: 1, items: vec![0] }];
    run_script(&cfg, script).expect("valid script")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeliveryOrder {
    /// Writes are applied as they arrive.
    Arrival,
    /// A write waits until every earlier write from the same primary is applied.
    Causal,
}

#[derive(Clone, Debug)]
pub struct InconsistencyDemo {
    pub history: History,
    /// `(x, y)` as read by the query at the replica.
    pub observed: (i64, i64),
    pub serializable: bool,
}

const X: u32 = 0;
const Y: u32 = 1;

/// Lazy primary copy: `T3` sets `x = 1`; `T4` reads that `x` and sets
/// `y = 1`. The replica receives `T4`'s write at tick 2 and `T3`'s at tick
/// 6; a query there at `query_tick` reads both items.
pub fn lazy_inconsistency_demo(order: DeliveryOrder, query_tick: u64) -> InconsistencyDemo {
    let t3 = ReplicaWrite { id: 1, item: X, old: 0, new: 1, ts: 1, origin: 0 };
    let t4 = ReplicaWrite { id: 2, item: Y, old: 0, new: 1, ts: 2, origin: 0 };
    let arrivals = [(2u64, t4), (6, t3)];
    let mut replica = NodeState::base(1, [X, Y], |_| 0);
    let mut pending: BTreeMap<u64, ReplicaWrite> = BTreeMap::new();
    let mut applied_ts = 0;
    for (at, w) in arrivals {
        if at > query_tick {
            break;
        }
        pending.insert(w.ts, w);
        // arrival order applies anything; causal order only the next timestamp
        while let Some((&ts, _)) = pending.first_key_value() {
            if order == DeliveryOrder::Causal && ts != applied_ts + 1 {
                break;
            }
            let w = pending.pop_first().expect("present").1;
            replica.apply_thomas(&w).expect("replica holds x and y");
            applied_ts = applied_ts.max(w.ts);
        }
    }
    let observed = (replica.value(X).expect("x"), replica.value(Y).expect("y"));

    let (t3, t4, q) = (TxnId(3), TxnId(4), TxnId(5));
    let mut h = History::new();
    h.load([("x".into(), Value::Int(0)), ("y".into(), Value::Int(0))]);
    h.begin(t3);
    h.write(t3, "x", Value::Int(1));
    h.commit(t3);
    h.begin(t4);
    h.read(t4, "x", Some(Value::Int(1)));
    h.write(t4, "y", Value::Int(1));
    h.commit(t4);
    h.begin(q);
    h.read(q, "x", Some(Value::Int(observed.0)));
    h.read(q, "y", Some(Value::Int(observed.1)));
    h.commit(q);
    let serializable = is_serializable(&h).expect("well-formed");
    InconsistencyDemo { history: h, observed, serializable }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eager_everywhere_two_node_deadlock() {
        let run = eager_deadlock_demo();
        assert_eq!(run.metrics.deadlocks, 1);
        assert_eq!(run.metrics.committed, 1);
        assert_eq!(run.metrics.aborted, 1);
        assert!(run.metrics.converged);
    }

    #[test]
    fn reordered_lazy_writes_expose_inconsistency() {
        let d = lazy_inconsistency_demo(DeliveryOrder::Arrival, 3);
        assert_eq!(d.observed, (0, 1));
        assert!(!d.serializable);
    }

    #[test]
    fn causal_delivery_hides_it() {
        let d = lazy_inconsistency_demo(DeliveryOrder::Causal, 3);
        assert_eq!(d.observed, (0, 0));
        assert!(d.serializable);
    }

    #[test]
    fn late_query_is_consistent() {
        for order in [DeliveryOrder::Arrival, DeliveryOrder::Causal] {
            let d = lazy_inconsistency_demo(order, 7);
            assert_eq!(d.observed, (1, 1));
            assert!(d.serializable);
        }
    }
}
