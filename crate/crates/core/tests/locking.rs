use proptest::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use txlab_core::lock::{compatible, Duration, LockMode, LockTable, Policy, ResourceId};
use txlab_core::TxnId;

/// db / table t{0,1} / row r{0..3}
fn path(table: u8, row: Option<u8>) -> Vec<ResourceId> {
    let db = ResourceId::new(["db"]);
    let t = db.child(format!("t{table}"));
    let mut out = vec![db, t.clone()];
    if let Some(r) = row {
        out.push(t.child(format!("r{r}")));
    }
    out
}

fn leaves() -> Vec<ResourceId> {
    (0..2).flat_map(|t| (0..4).map(move |r| path(t, Some(r)).pop().unwrap())).collect()
}

fn intention(mode: LockMode) -> LockMode {
    match mode {
        LockMode::IS | LockMode::S => LockMode::IS,
        _ => LockMode::IX,
    }
}

/// Real access a transaction has to `leaf`, derived from its explicit locks on
/// the leaf and its ancestors: 2 = write, 1 = read, 0 = none.
fn implicit_access(locks: &LockTable, txn: TxnId, leaf: &ResourceId) -> u8 {
    let mut access = 0;
    let mut node = Some(leaf.clone());
    while let Some(n) = node {
        access = access.max(match locks.holds(txn, &n) {
            Some(LockMode::X) => 2,
            Some(LockMode::S | LockMode::SIX) => 1,
            _ => 0,
        });
        node = n.parent();
    }
    access
}

/// Whether some node reaches itself, by transitive closure.
fn has_cycle(g: &BTreeMap<TxnId, BTreeSet<TxnId>>) -> bool {
    let mut reach = g.clone();
    loop {
        let mut grew = false;
        let snapshot = reach.clone();
        for (a, succ) in reach.iter_mut() {
            for b in snapshot.get(a).into_iter().flatten() {
                for c in snapshot.get(b).into_iter().flatten() {
                    grew |= succ.insert(*c);
                }
            }
        }
        if !grew {
            break;
        }
    }
    reach.iter().any(|(a, s)| s.contains(a))
}

#[derive(Clone, Debug)]
enum Step {
    /// Transaction slot asks for `mode` on a table or a row, intention locks first.
    Lock { slot: usize, table: u8, row: Option<u8>, mode: LockMode },
    Finish { slot: usize, abort: bool },
    Resolve,
}

fn arb_step() -> impl Strategy<Value = Step> {
    let mode = prop::sample::select(LockMode::ALL.to_vec());
    prop_oneof![
        8 => (0usize..4, 0u8..2, prop::option::of(0u8..4), mode).prop_map(|(slot, table, row, mode)| Step::Lock { slot, table, row, mode }),
        2 => (0usize..4, any::<bool>()).prop_map(|(slot, abort)| Step::Finish { slot, abort }),
        1 => Just(Step::Resolve),
    ]
}

struct Sim {
    locks: LockTable,
    slots: [Option<TxnId>; 4],
    next: u64,
}

impl Sim {
    fn new() -> Self {
        Self { locks: LockTable::new(Policy::Strict), slots: [None; 4], next: 1 }
    }

    fn txn(&mut self, slot: usize) -> TxnId {
        if let Some(t) = self.slots[slot].filter(|t| self.locks.is_active(*t)) {
            return t;
        }
        let t = TxnId(self.next);
        self.next += 1;
        self.locks.begin(t);
        self.slots[slot] = Some(t);
        t
    }

    fn step(&mut self, step: &Step) {
        match *step {
            Step::Lock { slot, table, row, mode } => {
                let t = self.txn(slot);
                let route = path(table, row);
                let last = route.len() - 1;
                for (depth, res) in route.iter().enumerate() {
                    if self.locks.is_blocked(t) {
                        return;
                    }
                    let want = if depth == last { mode } else { intention(mode) };
                    if self.locks.holds(t, res).is_some_and(|held| held.covers(want)) {
                        continue;
                    }
                    self.locks.acquire(t, res, want, Duration::Long).unwrap();
                }
            }
            Step::Finish { slot, abort } => {
                if let Some(t) = self.slots[slot].take().filter(|t| self.locks.is_active(*t)) {
                    if abort {
                        self.locks.abort(t);
                    } else if !self.locks.is_blocked(t) {
                        self.locks.release_all(t);
                    } else {
                        self.slots[slot] = Some(t);
                    }
                }
            }
            Step::Resolve => {
                self.locks.resolve_deadlocks();
            }
        }
    }

    fn live(&self) -> Vec<TxnId> {
        self.slots.iter().flatten().copied().filter(|t| self.locks.is_active(*t)).collect()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn granted_locks_are_pairwise_compatible(steps in prop::collection::vec(arb_step(), 1..60)) {
        let mut sim = Sim::new();
        for s in &steps {
            sim.step(s);
            let mut by_res: BTreeMap<&ResourceId, Vec<LockMode>> = BTreeMap::new();
            for (res, _, mode) in sim.locks.grants() {
                by_res.entry(res).or_default().push(mode);
            }
            for modes in by_res.values() {
                for (i, a) in modes.iter().enumerate() {
                    for b in &modes[i + 1..] {
                        prop_assert!(compatible(*a, *b), "{a} with {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn implicit_leaf_locks_never_conflict(steps in prop::collection::vec(arb_step(), 1..60)) {
        let mut sim = Sim::new();
        for s in &steps {
            sim.step(s);
            let live = sim.live();
            for leaf in leaves() {
                let access: Vec<u8> = live.iter().map(|t| implicit_access(&sim.locks, *t, &leaf)).collect();
                let writers = access.iter().filter(|a| **a == 2).count();
                let readers = access.iter().filter(|a| **a == 1).count();
                prop_assert!(writers == 0 || (writers == 1 && readers == 0), "{leaf}: {access:?}");
            }
        }
    }

    #[test]
    fn deadlock_detection_is_complete(steps in prop::collection::vec(arb_step(), 1..60)) {
        let mut sim = Sim::new();
        for s in &steps {
            sim.step(s);
            let g = sim.locks.waits_for();
            let cyclic = has_cycle(&g);
            let cycles = sim.locks.detect_deadlocks();
            prop_assert_eq!(cyclic, !cycles.is_empty());
            prop_assert_eq!(cyclic, sim.locks.find_cycle().is_some());
            for c in &cycles {
                for (k, t) in c.iter().enumerate() {
                    prop_assert!(g[t].contains(&c[(k + 1) % c.len()]));
                }
            }
            let live = sim.live();
            if !live.is_empty() && live.iter().all(|t| sim.locks.is_blocked(*t)) {
                prop_assert!(cyclic, "all of {live:?} blocked without a cycle");
            }
            let mut resolved = sim.locks.clone();
            let (victims, _) = resolved.resolve_deadlocks();
            prop_assert!(resolved.find_cycle().is_none());
            prop_assert_eq!(victims.is_empty(), !cyclic);
        }
    }
}
