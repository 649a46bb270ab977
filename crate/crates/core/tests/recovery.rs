use proptest::prelude::*;
use std::collections::BTreeMap;
use txlab_core::store::{CommitStatus, RecordKind, Store};
use txlab_core::{Key, TxnId, Value};

type Writes = BTreeMap<Key, Option<Value>>;

/// Test-side bookkeeping: every committed write set, in commit order, with the
/// log length right after its commit record.
#[derive(Default)]
struct Ledger {
    commits: Vec<(usize, Writes)>,
}

impl Ledger {
    /// State made of the commits whose commit record lies in the first `keep` records.
    fn expected(&self, keep: usize) -> BTreeMap<Key, Value> {
        let mut state = BTreeMap::new();
        for (end, writes) in &self.commits {
            if *end > keep {
                break;
            }
            for (k, v) in writes {
                match v {
                    Some(v) => state.insert(k.clone(), v.clone()),
                    None => state.remove(k),
                };
            }
        }
        state
    }
}

#[derive(Clone, Debug)]
enum Step {
    Begin,
    Write(usize, u8, i64),
    Delete(usize, u8),
    Commit(usize),
    Abort(usize),
    Checkpoint,
}

struct Driver {
    store: Store,
    live: Vec<(TxnId, Writes)>,
    ledger: Ledger,
}

impl Driver {
    fn new() -> Self {
        Self { store: Store::new(), live: Vec::new(), ledger: Ledger::default() }
    }

    fn step(&mut self, step: &Step) {
        let n = self.live.len();
        match *step {
            Step::Begin => {
                let t = self.store.begin();
                self.live.push((t, Writes::new()));
            }
            Step::Write(i, k, v) if n > 0 => {
                let (t, w) = &mut self.live[i % n];
                let key: Key = format!("k{k}");
                self.store.write(*t, key.clone(), Value::Int(v)).unwrap();
                w.insert(key, Some(Value::Int(v)));
            }
            Step::Delete(i, k) if n > 0 => {
                let (t, w) = &mut self.live[i % n];
                let key: Key = format!("k{k}");
                self.store.delete(*t, key.clone()).unwrap();
                w.insert(key, None);
            }
            Step::Commit(i) if n > 0 => {
                let (t, w) = self.live.remove(i % n);
                assert_eq!(self.store.commit(t).unwrap(), CommitStatus::Committed);
                self.ledger.commits.push((self.store.log().len(), w));
            }
            Step::Abort(i) if n > 0 => {
                let (t, _) = self.live.remove(i % n);
                self.store.abort(t).unwrap();
            }
            Step::Checkpoint => {
                let _ = self.store.checkpoint();
            }
            _ => {}
        }
    }

    /// Crashes a copy at every log boundary and checks the recovered state.
    fn check_every_crash_point(&self) {
        for keep in 0..=self.store.log().len() {
            let mut s = self.store.clone();
            s.crash_truncating(keep);
            let recovered = s.recover().clone();
            assert_eq!(recovered, self.ledger.expected(keep), "crash after {keep} records");
            let digest = s.state_digest();
            s.recover();
            assert_eq!(s.state_digest(), digest, "second recovery after {keep} records");
            let mut records: Vec<_> = s.log().iter().filter(|r| r.kind == RecordKind::Update).map(|r| r.txn).collect();
            records.dedup();
            for txn in records {
                let ends = s.log().iter().filter(|r| r.txn == txn && matches!(r.kind, RecordKind::Commit | RecordKind::Abort)).count();
                assert_eq!(ends, 1, "{txn} after {keep} records");
            }
        }
    }
}

/// Twenty interleaved transactions: most commit, some abort, a few are still
/// running when the log ends.
fn twenty_txn_workload() -> Vec<Step> {
    let mut steps = Vec::new();
    for t in 0..20usize {
        steps.push(Step::Begin);
        steps.push(Step::Write(t, (t % 7) as u8, t as i64));
        if t % 3 == 0 {
            steps.push(Step::Write(t + 1, ((t + 3) % 7) as u8, 100 + t as i64));
        }
        if t % 5 == 4 {
            steps.push(Step::Delete(t, ((t + 1) % 7) as u8));
        }
        match t % 6 {
            0 | 5 => {}
            3 => steps.push(Step::Abort(0)),
            _ => steps.push(Step::Commit(t)),
        }
    }
    steps
}

#[test]
fn recovery_restores_the_committed_prefix_at_every_crash_point() {
    let mut d = Driver::new();
    let mut begun = 0;
    for step in twenty_txn_workload() {
        begun += usize::from(matches!(step, Step::Begin));
        d.step(&step);
    }
    assert_eq!(begun, 20);
    assert!(d.ledger.commits.len() >= 10 && !d.live.is_empty());
    d.check_every_crash_point();
}

#[test]
fn checkpoint_does_not_change_the_recovered_state() {
    let steps = twenty_txn_workload();
    let (mut plain, mut ckpt) = (Driver::new(), Driver::new());
    for (k, step) in steps.iter().enumerate() {
        plain.step(step);
        ckpt.step(step);
        if k % 4 == 0 {
            ckpt.step(&Step::Checkpoint);
        }
    }
    assert!(ckpt.store.checkpoint_lsn().is_some());
    let (mut a, mut b) = (plain.store.clone(), ckpt.store.clone());
    a.crash();
    b.crash();
    assert_eq!(a.recover(), b.recover());
}

fn arb_step() -> impl Strategy<Value = Step> {
    prop_oneof![
        2 => Just(Step::Begin),
        4 => (0usize..8, 0u8..6, -9i64..10).prop_map(|(i, k, v)| Step::Write(i, k, v)),
        1 => (0usize..8, 0u8..6).prop_map(|(i, k)| Step::Delete(i, k)),
        2 => (0usize..8).prop_map(Step::Commit),
        1 => (0usize..8).prop_map(Step::Abort),
        1 => Just(Step::Checkpoint),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn any_crash_point_recovers_exactly_the_committed_prefix(steps in prop::collection::vec(arb_step(), 0..40)) {
        let mut d = Driver::new();
        for s in &steps {
            d.step(s);
        }
        d.check_every_crash_point();
        let rebuilt = Store::from_log(d.store.log().to_vec());
        prop_assert_eq!(rebuilt.stable(), &d.ledger.expected(usize::MAX));
    }
}
