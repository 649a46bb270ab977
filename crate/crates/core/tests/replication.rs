use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};
use std::collections::BTreeMap;
use txlab_core::replication::*;

fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head.clone());
            out.push(tail);
        }
    }
    out
}

fn write(id: u64, item: Item, new: i64, ts: u64) -> ReplicaWrite {
    ReplicaWrite { id, item, old: 0, new, ts, origin: 0 }
}

fn replicas(n: usize, items: Item) -> Vec<NodeState> {
    (0..n).map(|i| NodeState::base(i, 0..items, |_| 0)).collect()
}

/// Latest-timestamp value per item, computed without the replica code.
fn newest(writes: &[ReplicaWrite], items: Item) -> BTreeMap<Item, i64> {
    (0..items)
        .map(|i| (i, writes.iter().filter(|w| w.item == i).max_by_key(|w| w.ts).map_or(0, |w| w.new)))
        .collect()
}

#[test]
fn thomas_rule_converges_for_every_order() {
    let writes = [write(1, 0, 10, 1), write(2, 0, 20, 2), write(3, 0, 30, 3), write(4, 0, 40, 4)];
    let orders = permutations(&writes);
    assert_eq!(orders.len(), 24);
    for (k, order) in orders.iter().enumerate() {
        let mut nodes = replicas(3, 1);
        for (r, node) in nodes.iter_mut().enumerate() {
            // each replica sees a different order, some with redelivery
            let mine = &orders[(k + r * 7) % orders.len()];
            let seq: Vec<&ReplicaWrite> = if r == 0 { order.iter().collect() } else { mine.iter().chain(mine.iter().take(r)).collect() };
            for w in seq {
                node.apply_thomas(w).unwrap();
            }
        }
        assert!(nodes.iter().all(|n| n.replicas == nodes[0].replicas));
        assert_eq!(nodes[0].value(0), Some(40));
    }
}

#[test]
fn old_value_check_flags_divergence_and_redelivery() {
    let mut n = NodeState::base(0, [0], |_| 5);
    let w = ReplicaWrite { id: 1, item: 0, old: 5, new: 6, ts: 1, origin: 1 };
    assert_eq!(n.apply_lazy(&w).unwrap(), LazyApply::Applied);
    assert_eq!(n.apply_lazy(&w).unwrap(), LazyApply::ReconciliationNeeded { duplicate: true });
    let stale = ReplicaWrite { id: 2, item: 0, old: 5, new: 9, ts: 2, origin: 2 };
    assert_eq!(n.apply_lazy(&stale).unwrap(), LazyApply::ReconciliationNeeded { duplicate: false });
    assert_eq!(n.value(0), Some(6));
}

fn scaling(strategy: Strategy) -> Sweep {
    let base = ReplicationConfig { strategy, nodes: 2, txn_rate: 0.02, db_size: 1000, duration: 20_000, ..Default::default() };
    scaling_sweep(&base, SweepAxis::Nodes, &[2.0, 4.0, 8.0, 16.0], &[0, 1, 2, 3]).unwrap().0
}

#[test]
fn propagated_work_grows_quadratically_in_nodes() {
    for s in Strategy::ALL {
        let slope = scaling(s).work_slope.unwrap();
        assert!((slope - 2.0).abs() <= 0.1, "{}: {slope}", s.name());
    }
}

#[test]
fn lazy_reconciliations_rise_with_nodes() {
    let sweep = scaling(Strategy::LazyEverywhere);
    let rates: Vec<f64> = sweep.points.iter().map(|p| p.reconciliation_rate).collect();
    assert!(rates[0] > 0.0 && rates.windows(2).all(|w| w[0] < w[1]), "{rates:?}");
}

#[test]
fn eager_primary_deadlocks_ignore_node_count_at_fixed_load() {
    let base = ReplicationConfig {
        strategy: Strategy::EagerPrimary,
        txn_rate: 0.4,
        db_size: 200,
        duration: 20_000,
        total_load: true,
        ..Default::default()
    };
    let sweep = scaling_sweep(&base, SweepAxis::Nodes, &[2.0, 4.0, 8.0, 16.0], &[0, 1, 2, 3]).unwrap().0;
    assert!(sweep.points.iter().all(|p| p.deadlock_rate > 0.0));
    assert!(sweep.deadlock_slope.unwrap().abs() <= 0.2);
}

#[test]
fn eager_everywhere_deadlocks_are_monotone() {
    let nodes = [1usize, 2, 4, 8];
    let rates = [0.01, 0.02, 0.04];
    let mut grid = vec![vec![0.0; nodes.len()]; rates.len()];
    for (ri, r) in rates.iter().enumerate() {
        for (ni, n) in nodes.iter().enumerate() {
            let runs: Vec<f64> = (0..4)
                .map(|seed| {
                    let cfg = ReplicationConfig { nodes: *n, txn_rate: *r, db_size: 1000, duration: 50_000, seed, ..Default::default() };
                    run_replication(&cfg).unwrap().metrics.deadlock_rate()
                })
                .collect();
            grid[ri][ni] = runs.iter().sum::<f64>() / runs.len() as f64;
        }
    }
    for row in &grid {
        assert!(row.windows(2).all(|w| w[0] <= w[1]), "{grid:?}");
    }
    for ni in 0..nodes.len() {
        assert!(grid.windows(2).all(|w| w[0][ni] <= w[1][ni]), "{grid:?}");
    }
    assert!(grid[rates.len() - 1][nodes.len() - 1] > 0.0);
}

fn arb_write(items: Item) -> impl proptest::strategy::Strategy<Value = (Item, i64)> {
    (0..items, -50i64..50)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn thomas_replicas_converge(
        writes in prop::collection::vec(arb_write(3), 1..12),
        shuffles in prop::collection::vec(prop::collection::vec(any::<prop::sample::Index>(), 0..30), 3),
    ) {
        let writes: Vec<ReplicaWrite> =
            writes.iter().enumerate().map(|(k, (i, v))| write(k as u64 + 1, *i, *v, k as u64 + 1)).collect();
        let mut nodes = replicas(3, 3);
        for (node, picks) in nodes.iter_mut().zip(&shuffles) {
            let mut order = writes.clone();
            let len = order.len();
            for (k, p) in picks.iter().enumerate() {
                order.swap(k % len, p.index(len));
            }
            // redeliver a prefix
            let extra: Vec<ReplicaWrite> = order.iter().take(picks.len() % 4).copied().collect();
            for w in order.iter().chain(&extra) {
                node.apply_thomas(w).unwrap();
            }
        }
        let expect = newest(&writes, 3);
        for n in &nodes {
            prop_assert_eq!(n.values(), expect.clone());
        }
    }

    #[test]
    fn two_tier_round_trip_conserves_money(
        base_edits in prop::collection::vec((1u32..3, 0i64..100), 0..4),
        moves in prop::collection::vec((0u32..3, 0u32..3, 0i64..60), 1..6),
        accept_all in any::<bool>(),
    ) {
        let mut s = TwoTier::new(&[(0, 100), (1, 100), (2, 100)], &[0, 1, 2], &[0]).unwrap();
        s.disconnect();
        let mut total = 300;
        for (item, v) in &base_edits {
            total += v - s.base.value(*item).unwrap();
            s.base_update(*item, *v).unwrap();
        }
        for (k, (from, to, amount)) in moves.iter().enumerate() {
            if from == to {
                continue;
            }
            let program = Program::Transfer { from: *from, to: *to, amount: *amount };
            s.run_mobile(MobileTxn { name: format!("t{k}"), program }).unwrap();
        }
        let always = |_: &TxnResult, _: &TxnResult| true;
        let rt = if accept_all { s.reconnect(&always).unwrap() } else { s.reconnect(&exact).unwrap() };
        if accept_all {
            prop_assert!(rt.rejected.is_empty());
        }
        prop_assert_eq!(s.base.values().values().sum::<i64>(), total);
        prop_assert_eq!(s.mobile.values(), s.base_subset());
        prop_assert!(s.base.values().values().all(|v| *v >= 0));
    }
}
