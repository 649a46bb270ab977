//! Two-tier replication: always-connected base nodes hold the whole
//! database, a mobile node holds a subset and sometimes disconnects.
//!
//! A transaction on the disconnected mobile node is firm when the mobile
//! node owns the primary copy of everything it reads, and tentative
//! otherwise. Tentative work is redone against the primary copies on
//! reconnection and kept only if it produces the same result or the
//! acceptance test allows the difference.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Item, NodeState, ReplicationError, Tier};

/// Transaction logic, re-runnable against any replica.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Program {
    Set { item: Item, value: i64 },
    Add { item: Item, delta: i64 },
    /// Withdraws `amount` if the balance covers it; outputs the balance after.
    Debit { item: Item, amount: i64 },
    Transfer { from: Item, to: Item, amount: i64 },
}

impl Program {
    pub fn items(&self) -> Vec<Item> {
        match *self {
            Program::Set { item, .. } | Program::Add { item, .. } | Program::Debit { item, .. } => alloc::vec![item],
            Program::Transfer { from, to, .. } => alloc::vec![from, to],
        }
    }

    fn reads(&self) -> Vec<Item> {
        match self {
            Program::Set { .. } => Vec::new(),
            _ => self.items(),
        }
    }

    fn run(&self, state: &BTreeMap<Item, i64>) -> Result<TxnResult, ReplicationError> {
        let get = |i: Item| state.get(&i).copied().ok_or(ReplicationError::NoReplica(i));
        let mut writes = BTreeMap::new();
        let output = match *self {
            Program::Set { item, value } => {
                get(item)?;
                writes.insert(item, value);
                value
            }
            Program::Add { item, delta } => {
                let v = get(item)? + delta;
                writes.insert(item, v);
                v
            }
            Program::Debit { item, amount } => {
                let v = get(item)?;
                if v >= amount {
                    writes.insert(item, v - amount);
                    v - amount
                } else {
                    v
                }
            }
            Program::Transfer { from, to, amount } => {
                let (a, b) = (get(from)?, get(to)?);
                if a >= amount {
                    writes.insert(from, a - amount);
                    writes.insert(to, b + amount);
                    a - amount
                } else {
                    a
                }
            }
        };
        Ok(TxnResult { writes, output })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MobileTxn {
    pub name: String,
    pub program: Program,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxnMode {
    Tentative,
    Firm,
}

/// What a transaction wrote and what it returned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxnResult {
    pub writes: BTreeMap<Item, i64>,
    pub output: i64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoundTrip {
    /// Firm transactions whose results were installed at the base.
    pub firm: Vec<String>,
    /// Tentative transactions installed after replay.
    pub installed: Vec<String>,
    /// Tentative transactions refused, with a diagnostic for the mobile user.
    pub rejected: Vec<(String, String)>,
}

#[derive(Clone, Debug)]
struct Logged {
    txn: MobileTxn,
    mode: TxnMode,
    result: TxnResult,
}

#[derive(Clone, Debug)]
pub struct TwoTier {
    pub base: NodeState,
    pub mobile: NodeState,
    mobile_primaries: BTreeSet<Item>,
    /// Mobile values without the effect of tentative transactions.
    firm_view: BTreeMap<Item, i64>,
    log: Vec<Logged>,
}

fn apply(node: &mut NodeState, writes: &BTreeMap<Item, i64>) -> Result<(), ReplicationError> {
    for (&i, &v) in writes {
        node.set(i, v)?;
    }
    Ok(())
}

impl TwoTier {
    /// `items` is the whole database; the mobile node replicates `mask` and
    /// owns the primary copies of `mobile_primaries`.
    pub fn new(items: &[(Item, i64)], mask: &[Item], mobile_primaries: &[Item]) -> Result<Self, ReplicationError> {
        let all: BTreeMap<Item, i64> = items.iter().copied().collect();
        if let Some(&i) = mask.iter().chain(mobile_primaries).find(|i| !all.contains_key(i)) {
            return Err(ReplicationError::NoReplica(i));
        }
        if let Some(&i) = mobile_primaries.iter().find(|i| !mask.contains(i)) {
            return Err(ReplicationError::NoReplica(i));
        }
        let base = NodeState::base(0, all.keys().copied(), |i| all[&i]);
        let mut mobile = NodeState::base(1, mask.iter().copied(), |i| all[&i]);
        mobile.tier = Tier::Mobile;
        Ok(TwoTier {
            firm_view: mobile.values(),
            base,
            mobile,
            mobile_primaries: mobile_primaries.iter().copied().collect(),
            log: Vec::new(),
        })
    }

    pub fn disconnect(&mut self) {
        self.mobile.connected = false;
    }

    /// A committed base-side transaction setting `item`.
    pub fn base_update(&mut self, item: Item, value: i64) -> Result<(), ReplicationError> {
        if self.mobile_primaries.contains(&item) {
            return Err(ReplicationError::Config("the primary copy of that item is on the mobile node"));
        }
        self.base.set(item, value)?;
        if self.mobile.connected && self.mobile.replicas.contains_key(&item) {
            self.mobile.set(item, value)?;
            self.firm_view.insert(item, value);
        }
        Ok(())
    }

    /// Runs a transaction on the disconnected mobile node.
    pub fn run_mobile(&mut self, txn: MobileTxn) -> Result<(TxnMode, TxnResult), ReplicationError> {
        if self.mobile.connected {
            return Err(ReplicationError::NotDisconnected);
        }
        let mode = if txn.program.reads().iter().all(|i| self.mobile_primaries.contains(i)) {
            TxnMode::Firm
        } else {
            TxnMode::Tentative
        };
        let result = txn.program.run(&self.mobile.values())?;
        if mode == TxnMode::Firm {
            if txn.program.items().iter().any(|i| !self.mobile_primaries.contains(i)) {
                return Err(ReplicationError::Config("firm transaction writes an item owned by the base"));
            }
            let firm = txn.program.run(&self.firm_view)?;
            self.firm_view.extend(firm.writes.iter().map(|(k, v)| (*k, *v)));
        }
        apply(&mut self.mobile, &result.writes)?;
        self.log.push(Logged { txn, mode, result: result.clone() });
        Ok((mode, result))
    }

    /// Reconnects and reconciles. `accept(original, replay)` decides tentative
    /// transactions whose replay differs from the original run.
    pub fn reconnect(&mut self, accept: &dyn Fn(&TxnResult, &TxnResult) -> bool) -> Result<RoundTrip, ReplicationError> {
        if self.mobile.connected {
            return Err(ReplicationError::NotDisconnected);
        }
        // 1. drop versions written by tentative transactions
        for (&i, &v) in &self.firm_view {
            self.mobile.set(i, v)?;
        }
        let mut out = RoundTrip::default();
        let log = core::mem::take(&mut self.log);
        // 2. install firm results at the base
        for l in log.iter().filter(|l| l.mode == TxnMode::Firm) {
            let firm = l.txn.program.run(&self.base.values())?;
            apply(&mut self.base, &firm.writes)?;
            out.firm.push(l.txn.name.clone());
        }
        // 3. replay tentative transactions on the primary copies
        for l in log.iter().filter(|l| l.mode == TxnMode::Tentative) {
            let replay = l.txn.program.run(&self.base.values())?;
            if replay == l.result || accept(&l.result, &replay) {
                apply(&mut self.base, &replay.writes)?;
                out.installed.push(l.txn.name.clone());
            } else {
                let why = format!(
                    "{}: output {} on the mobile node but {} on the base; writes {:?} vs {:?}",
                    l.txn.name, l.result.output, replay.output, l.result.writes, replay.writes
                );
                out.rejected.push((l.txn.name.clone(), why));
            }
        }
        // 4. refresh the mobile replicas from the base
        let items: Vec<Item> = self.mobile.replicas.keys().copied().collect();
        for i in items {
            let v = self.base.value(i).expect("base holds everything");
            self.mobile.set(i, v)?;
        }
        self.firm_view = self.mobile.values();
        self.mobile.connected = true;
        Ok(out)
    }

    /// The base's values for the items the mobile node replicates.
    pub fn base_subset(&self) -> BTreeMap<Item, i64> {
        self.mobile.replicas.keys().map(|i| (*i, self.base.value(*i).expect("base holds everything"))).collect()
    }
}

/// Default acceptance test: any difference rejects.
pub fn exact(_: &TxnResult, _: &TxnResult) -> bool {
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    const ACCT: Item = 0;
    const NOTES: Item = 1;

    fn system() -> TwoTier {
        let mut s = TwoTier::new(&[(ACCT, 100), (NOTES, 0), (2, 7)], &[ACCT, NOTES], &[NOTES]).unwrap();
        s.disconnect();
        s
    }

    fn debit(amount: i64) -> MobileTxn {
        MobileTxn { name: "debit".into(), program: Program::Debit { item: ACCT, amount } }
    }

    #[test]
    fn matching_replay_installs() {
        let mut s = system();
        assert_eq!(s.run_mobile(debit(30)).unwrap().0, TxnMode::Tentative);
        let rt = s.reconnect(&exact).unwrap();
        assert_eq!(rt.installed, ["debit"]);
        assert_eq!(s.base.value(ACCT), Some(70));
        assert_eq!(s.mobile.values(), s.base_subset());
    }

    #[test]
    fn changed_balance_rejects_under_exact_equality() {
        let mut s = system();
        s.run_mobile(debit(30)).unwrap();
        s.base_update(ACCT, 50).unwrap();
        let rt = s.reconnect(&exact).unwrap();
        assert!(rt.installed.is_empty());
        assert_eq!(rt.rejected.len(), 1);
        assert!(rt.rejected[0].1.contains("output 70"));
        assert_eq!(s.base.value(ACCT), Some(50));
        assert_eq!(s.mobile.values(), s.base_subset());
    }

    #[test]
    fn lenient_acceptance_installs_the_replay() {
        let mut s = system();
        s.run_mobile(debit(30)).unwrap();
        s.base_update(ACCT, 50).unwrap();
        let rt = s.reconnect(&|_, _| true).unwrap();
        assert_eq!(rt.installed, ["debit"]);
        assert_eq!(s.base.value(ACCT), Some(20));
    }

    #[test]
    fn firm_transactions_install_without_replay() {
        let mut s = system();
        let note = MobileTxn { name: "note".into(), program: Program::Add { item: NOTES, delta: 1 } };
        assert_eq!(s.run_mobile(note).unwrap().0, TxnMode::Firm);
        let rt = s.reconnect(&exact).unwrap();
        assert_eq!(rt.firm, ["note"]);
        assert_eq!(s.base.value(NOTES), Some(1));
    }

    #[test]
    fn errors() {
        let mut s = TwoTier::new(&[(0, 1)], &[0], &[]).unwrap();
        assert_eq!(s.reconnect(&exact).unwrap_err(), ReplicationError::NotDisconnected);
        s.disconnect();
        let far = MobileTxn { name: "x".into(), program: Program::Add { item: 5, delta: 1 } };
        assert_eq!(s.run_mobile(far).unwrap_err(), ReplicationError::NoReplica(5));
        assert!(TwoTier::new(&[(0, 1)], &[0], &[3]).is_err());
    }
}
