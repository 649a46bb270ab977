use alloc::collections::BTreeSet;

use super::{Duration, LockMode, Target};
use crate::types::TxnId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum LockEventKind {
    Acquire,
    Block,
    Grant,
    Release,
    Abort,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LockEvent {
    pub txn: TxnId,
    pub kind: LockEventKind,
    pub target: Option<Target>,
    pub mode: Option<LockMode>,
    pub duration: Option<Duration>,
    pub tick: u64,
}

/// True iff no transaction requests or obtains a lock after releasing one.
pub fn two_phase_check<'a, I>(trace: I) -> bool
where
    I: IntoIterator<Item = &'a LockEvent>,
{
    let mut shrinking = BTreeSet::new();
    for ev in trace {
        match ev.kind {
            LockEventKind::Acquire | LockEventKind::Grant | LockEventKind::Block => {
                if shrinking.contains(&ev.txn) {
                    return false;
                }
            }
            LockEventKind::Release | LockEventKind::Abort => {
                shrinking.insert(ev.txn);
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn ev(txn: u64, kind: LockEventKind) -> LockEvent {
        LockEvent { txn: TxnId(txn), kind, target: None, mode: None, duration: None, tick: 0 }
    }

    #[test]
    fn growing_then_shrinking() {
        use LockEventKind::*;
        let t: Vec<_> = [Acquire, Acquire, Release, Release].into_iter().map(|k| ev(1, k)).collect();
        assert!(two_phase_check(&t));
        let t: Vec<_> = [Acquire, Release, Acquire].into_iter().map(|k| ev(1, k)).collect();
        assert!(!two_phase_check(&t));
        assert!(two_phase_check(&[]));
        // other transactions do not interfere
        let t = [ev(1, Acquire), ev(2, Release), ev(1, Acquire)];
        assert!(two_phase_check(&t));
    }
}
