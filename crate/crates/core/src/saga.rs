//! Sagas, compensating transactions and commit dependencies.
//!
//! A saga is a sequence of steps, each committed as its own short
//! transaction. When a step fails, the compensations of the steps that already
//! committed run in reverse order, each again as its own transaction. Committed
//! work is never rolled back in place: the only way to cancel it is to run
//! another transaction, so the log keeps both.
//!
//! Step bodies are scripted operation lists. Each operation is a protected
//! action (a store write, undone on abort), a real action (deferred until
//! commit and carried out at most once) or an unprotected action (recorded
//! immediately and never undone).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::store::{CommitStatus, LogRecord, RecordKind, Store, StoreError, TxnStatus};
use crate::types::{Key, TxnId, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ActionKind {
    Protected,
    Real,
    Unprotected,
}

/// One scripted operation inside a step body.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "op", rename_all = "camelCase"))]
pub enum Op {
    Set { key: Key, value: Value },
    /// Adds to an integer entity; a missing entity counts as 0.
    Add { key: Key, delta: i64 },
    /// Fails the transaction unless the integer entity is at least `min`.
    Require { key: Key, min: i64 },
    /// Emits to a real entity; happens only if the transaction commits.
    Emit { key: Key, value: Value },
    /// Side effect outside the store, such as a log line.
    Note { text: String },
    Fail { reason: String },
}

impl Op {
    pub fn kind(&self) -> ActionKind {
        match self {
            Op::Emit { .. } => ActionKind::Real,
            Op::Note { .. } => ActionKind::Unprotected,
            _ => ActionKind::Protected,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct SagaStep {
    pub name: String,
    pub forward: Vec<Op>,
    /// `None` when the step needs no compensation.
    #[cfg_attr(feature = "serde", serde(default))]
    pub compensation: Option<Vec<Op>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Role {
    Forward,
    Compensation,
}

/// One transaction the saga ran.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct StepTxn {
    pub step: usize,
    pub role: Role,
    pub txn: TxnId,
    pub committed: bool,
}

/// An action that took effect, in execution order.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct ActionRecord {
    pub txn: TxnId,
    pub kind: ActionKind,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "outcome", rename_all = "camelCase"))]
pub enum SagaOutcome {
    Completed,
    /// Step `step` failed and every earlier step was compensated.
    CompensatedAt { step: usize },
    /// A compensation failed; the saga stopped there without retrying.
    CompensationFailed { step: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct SagaRun {
    pub outcome: SagaOutcome,
    pub txns: Vec<StepTxn>,
    pub actions: Vec<ActionRecord>,
}

impl SagaRun {
    /// Steps whose compensation ran, in the order it ran.
    pub fn compensated(&self) -> Vec<usize> {
        self.txns.iter().filter(|t| t.role == Role::Compensation).map(|t| t.step).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SagaError {
    #[error("a saga needs at least one step")]
    Empty,
    #[error("failure injected at step {0}, but the saga has only {1} steps")]
    NoSuchStep(usize, usize),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Runs `ops` as one transaction. Returns the failure reason if it aborted.
fn run_body(store: &mut Store, ops: &[Op], actions: &mut Vec<ActionRecord>) -> Result<(TxnId, Option<String>), StoreError> {
    let txn = store.begin();
    let mut protected = Vec::new();
    let mut failure = None;
    for op in ops {
        let int = |store: &Store, key: &str| store.read(txn, key).map(|v| v.and_then(|v| v.as_int()).unwrap_or(0));
        match op {
            Op::Set { key, value } => {
                store.write(txn, key.clone(), value.clone())?;
                protected.push(format!("set {key} = {value}"));
            }
            Op::Add { key, delta } => {
                let v = int(store, key)? + delta;
                store.write(txn, key.clone(), Value::Int(v))?;
                protected.push(format!("set {key} = {v}"));
            }
            Op::Require { key, min } => {
                let v = int(store, key)?;
                if v < *min {
                    failure = Some(format!("{key} is {v}, below {min}"));
                }
            }
            Op::Emit { key, value } => store.emit_real(txn, key.clone(), value.clone())?,
            Op::Note { text } => actions.push(ActionRecord { txn, kind: ActionKind::Unprotected, detail: text.clone() }),
            Op::Fail { reason } => failure = Some(reason.clone()),
        }
        if failure.is_some() {
            break;
        }
    }
    if failure.is_some() {
        store.abort(txn)?;
        return Ok((txn, failure));
    }
    let emitted_before = store.emitted().len();
    if store.commit(txn)? != CommitStatus::Committed {
        store.abort(txn)?;
        return Ok((txn, Some(String::from("held back by a commit dependency"))));
    }
    actions.extend(protected.into_iter().map(|detail| ActionRecord { txn, kind: ActionKind::Protected, detail }));
    for e in &store.emitted()[emitted_before..] {
        actions.push(ActionRecord { txn: e.txn, kind: ActionKind::Real, detail: format!("{} <- {}", e.key, e.value) });
    }
    Ok((txn, None))
}

/// Runs the saga to completion or compensates the committed prefix.
pub fn run_saga(store: &mut Store, steps: &[SagaStep]) -> Result<SagaRun, SagaError> {
    execute(store, steps, None)
}

/// Like [`run_saga`], but step `fail_at` fails as if its body had.
pub fn run_saga_failing_at(store: &mut Store, steps: &[SagaStep], fail_at: usize) -> Result<SagaRun, SagaError> {
    if fail_at >= steps.len() {
        return Err(SagaError::NoSuchStep(fail_at, steps.len()));
    }
    execute(store, steps, Some(fail_at))
}

fn execute(store: &mut Store, steps: &[SagaStep], fail_at: Option<usize>) -> Result<SagaRun, SagaError> {
    if steps.is_empty() {
        return Err(SagaError::Empty);
    }
    let mut run = SagaRun { outcome: SagaOutcome::Completed, txns: Vec::new(), actions: Vec::new() };
    let mut failed = None;
    for (k, step) in steps.iter().enumerate() {
        let mut body = step.forward.clone();
        if fail_at == Some(k) {
            body.push(Op::Fail { reason: format!("injected failure in {}", step.name) });
        }
        let (txn, failure) = run_body(store, &body, &mut run.actions)?;
        run.txns.push(StepTxn { step: k, role: Role::Forward, txn, committed: failure.is_none() });
        if failure.is_some() {
            failed = Some(k);
            break;
        }
    }
    let Some(k) = failed else { return Ok(run) };
    for j in (0..k).rev() {
        let Some(comp) = &steps[j].compensation else { continue };
        let (txn, failure) = run_body(store, comp, &mut run.actions)?;
        run.txns.push(StepTxn { step: j, role: Role::Compensation, txn, committed: failure.is_none() });
        if let Some(reason) = failure {
            run.outcome = SagaOutcome::CompensationFailed { step: j, reason };
            return Ok(run);
        }
    }
    run.outcome = SagaOutcome::CompensatedAt { step: k };
    Ok(run)
}

/// Cancels a committed transaction by running `compensation` as a new one.
pub fn compensate_committed(store: &mut Store, txn: TxnId, compensation: &[Op]) -> Result<TxnId, StoreError> {
    if store.status(txn) != Some(TxnStatus::Committed) {
        return Err(StoreError::TxnNotCommitted(txn));
    }
    let mut actions = Vec::new();
    match run_body(store, compensation, &mut actions)? {
        (c, None) => Ok(c),
        (c, Some(_)) => Err(StoreError::TxnNotCommitted(c)),
    }
}

/// Checks that every dependent committed only after all its prerequisites,
/// and never when a prerequisite did not commit.
pub fn dependency_order_holds(log: &[LogRecord], deps: &[(TxnId, TxnId)]) -> bool {
    let commits: BTreeMap<TxnId, usize> = log
        .iter()
        .enumerate()
        .filter(|(_, r)| r.kind == RecordKind::Commit)
        .map(|(i, r)| (r.txn, i))
        .collect();
    deps.iter().all(|(dependent, prerequisite)| match (commits.get(dependent), commits.get(prerequisite)) {
        (Some(d), Some(p)) => p < d,
        (Some(_), None) => false,
        (None, _) => true,
    })
}

/// Flight, hotel and car bookings, each cancellable.
pub fn itinerary() -> Vec<SagaStep> {
    let book = |name: &str, key: &str| SagaStep {
        name: name.into(),
        forward: alloc::vec![
            Op::Require { key: format!("seats/{key}"), min: 1 },
            Op::Add { key: format!("seats/{key}"), delta: -1 },
            Op::Add { key: format!("booked/{key}"), delta: 1 },
        ],
        compensation: Some(alloc::vec![
            Op::Add { key: format!("seats/{key}"), delta: 1 },
            Op::Add { key: format!("booked/{key}"), delta: -1 },
            Op::Note { text: format!("cancelled {name}") },
        ]),
    };
    alloc::vec![book("flight", "flight"), book("hotel", "hotel"), book("car", "car")]
}

/// Seeds the inventory [`itinerary`] books from.
pub fn stock_itinerary(store: &mut Store, seats: i64) -> Result<(), StoreError> {
    let t = store.begin();
    for k in ["flight", "hotel", "car"] {
        store.write(t, format!("seats/{k}"), Value::Int(seats))?;
        store.write(t, format!("booked/{k}"), Value::Int(0))?;
    }
    store.commit(t)?;
    Ok(())
}
