use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use super::{apply_writes, select, EventKind, History, HistoryError};
use crate::types::{Key, TxnId, Value};

/// Largest number of committed transactions the brute-force oracle accepts.
pub const ORACLE_LIMIT: usize = 6;

/// Brute-force serializability: tries every order of the committed
/// transactions, replaying each one alone from the initial state, and accepts
/// if some order reproduces every committed read and the final state.
pub fn serial_oracle(history: &History) -> Result<bool, HistoryError> {
    history.validate()?;
    let txns = history.committed();
    if txns.len() > ORACLE_LIMIT {
        return Err(HistoryError::TooLarge(txns.len()));
    }
    let initial = history.initial_state();
    let target = history.final_state();
    let mut order = txns.clone();
    let mut found = false;
    permute(&mut order, 0, &mut |perm| {
        found = found || replays(history, perm, &initial, &target);
        found
    });
    Ok(found)
}

fn replays(history: &History, order: &[TxnId], initial: &BTreeMap<Key, Value>, target: &BTreeMap<Key, Value>) -> bool {
    let mut state = initial.clone();
    for &t in order {
        for e in history.events_of(t) {
            match e.kind {
                EventKind::Read => {
                    if state.get(e.key().expect("validated")) != e.value.as_ref() {
                        return false;
                    }
                }
                EventKind::PredicateRead => {
                    if select(&state, e.predicate().expect("validated")) != e.observed_rows() {
                        return false;
                    }
                }
                _ if e.is_write() => apply_writes(&mut state, core::iter::once(e)),
                _ => {}
            }
        }
    }
    &state == target
}

/// In-place permutation walk; `visit` returns true to stop early.
fn permute(items: &mut Vec<TxnId>, k: usize, visit: &mut dyn FnMut(&[TxnId]) -> bool) -> bool {
    if k == items.len() {
        return visit(items);
    }
    for i in k..items.len() {
        items.swap(k, i);
        if permute(items, k + 1, visit) {
            return true;
        }
        items.swap(k, i);
    }
    false
}
