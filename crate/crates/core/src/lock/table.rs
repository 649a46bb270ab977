use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use super::trace::{LockEvent, LockEventKind};
use super::{compatible, Duration, LockMode, Predicate, PredicateError};
use crate::types::TxnId;

/// A node in the lock hierarchy, named by its path from the root.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct ResourceId(Vec<String>);

impl ResourceId {
    pub fn new<I, S>(path: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ResourceId(path.into_iter().map(Into::into).collect())
    }

    pub fn child(&self, name: impl Into<String>) -> Self {
        let mut path = self.0.clone();
        path.push(name.into());
        ResourceId(path)
    }

    pub fn parent(&self) -> Option<ResourceId> {
        (self.0.len() > 1).then(|| ResourceId(self.0[..self.0.len() - 1].to_vec()))
    }

    pub fn path(&self) -> &[String] {
        &self.0
    }
}

impl fmt::Display for ResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("/"))
    }
}

/// What a lock is set on.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    Resource(ResourceId),
    Predicate(Predicate),
}

/// Whether long-duration locks may be released before the holder terminates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Policy {
    /// Long locks are held to termination (strict two-phase locking).
    #[default]
    Strict,
    /// Any lock may be released early.
    Relaxed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LockOutcome {
    Granted,
    Blocked,
}

/// A queued request that was granted as a side effect of a release.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Woken {
    pub txn: TxnId,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum LockError {
    #[error("{0} is not active")]
    TxnNotActive(TxnId),
    #[error("{resource} requested without a sufficient intention lock on {parent}")]
    AncestorIntentionMissing { resource: ResourceId, parent: ResourceId },
    #[error("{txn} holds no lock on {resource}")]
    NoSuchGrant { txn: TxnId, resource: ResourceId },
    #[error("{0} may not release a long lock before it terminates")]
    TwoPhaseViolation(TxnId),
    #[error("locks below {0} must be released first")]
    DescendantsHeld(ResourceId),
    #[error("malformed predicate: {0}")]
    MalformedPredicate(#[from] PredicateError),
    #[error("predicate locks are S or X, not {0}")]
    PredicateMode(LockMode),
    #[error("{0} already has an index parent")]
    SecondIndexParent(ResourceId),
}

#[derive(Clone, Debug)]
struct Holder {
    txn: TxnId,
    mode: LockMode,
    duration: Duration,
}

#[derive(Clone, Debug, Default)]
struct Entry {
    granted: Vec<Holder>,
    queue: VecDeque<Holder>,
}

#[derive(Clone, Debug)]
struct PredHolder {
    txn: TxnId,
    pred: Predicate,
    mode: LockMode,
    duration: Duration,
}

#[derive(Clone, Debug, Default)]
struct PredEntry {
    granted: Vec<PredHolder>,
    queue: VecDeque<PredHolder>,
}

#[derive(Clone, Copy, Debug)]
struct TxnInfo {
    start: u64,
    policy: Policy,
}

fn pred_conflict(a: &PredHolder, b_pred: &Predicate, b_mode: LockMode) -> bool {
    !(a.mode == LockMode::S && b_mode == LockMode::S) && a.pred.mutually_satisfiable(b_pred)
}

/// The lock table: a passive state machine mutated by its scheduler.
///
/// Requests that cannot be granted wait in a per-resource FIFO queue. A new
/// request is granted only if it is compatible with every holder and with every
/// request already waiting; an upgrade by a current holder is tried in place
/// first and only queues if another holder conflicts with the upgraded mode.
#[derive(Clone, Debug, Default)]
pub struct LockTable {
    default_policy: Policy,
    txns: BTreeMap<TxnId, TxnInfo>,
    next_start: u64,
    resources: BTreeMap<ResourceId, Entry>,
    held: BTreeMap<TxnId, BTreeSet<ResourceId>>,
    index_parent: BTreeMap<ResourceId, ResourceId>,
    predicates: BTreeMap<String, PredEntry>,
    trace: Vec<LockEvent>,
    record_trace: bool,
    tick: u64,
}

impl LockTable {
    pub fn new(default_policy: Policy) -> Self {
        LockTable { default_policy, record_trace: true, ..Default::default() }
    }

    /// Turns event recording on or off (long simulations switch it off).
    pub fn set_tracing(&mut self, on: bool) {
        self.record_trace = on;
    }

    pub fn set_tick(&mut self, tick: u64) {
        self.tick = tick;
    }

    pub fn trace(&self) -> &[LockEvent] {
        &self.trace
    }

    fn log(&mut self, txn: TxnId, kind: LockEventKind, target: Option<Target>, mode: Option<LockMode>, duration: Option<Duration>) {
        if self.record_trace {
            self.trace.push(LockEvent { txn, kind, target, mode, duration, tick: self.tick });
        }
    }

    pub fn begin(&mut self, txn: TxnId) {
        let policy = self.default_policy;
        self.begin_with_policy(txn, policy);
    }

    pub fn begin_with_policy(&mut self, txn: TxnId, policy: Policy) {
        if !self.txns.contains_key(&txn) {
            let start = self.next_start;
            self.next_start += 1;
            self.txns.insert(txn, TxnInfo { start, policy });
        }
    }

    pub fn is_active(&self, txn: TxnId) -> bool {
        self.txns.contains_key(&txn)
    }

    /// Start order of an active transaction; larger is younger.
    pub fn start_seq(&self, txn: TxnId) -> Option<u64> {
        self.txns.get(&txn).map(|i| i.start)
    }

    /// Registers `index_node` as a second parent of `child` (the index path).
    pub fn add_index_parent(&mut self, child: ResourceId, index_node: ResourceId) -> Result<(), LockError> {
        if self.index_parent.contains_key(&child) {
            return Err(LockError::SecondIndexParent(child));
        }
        self.index_parent.insert(child, index_node);
        Ok(())
    }

    pub fn parents(&self, res: &ResourceId) -> Vec<ResourceId> {
        let mut out: Vec<ResourceId> = res.parent().into_iter().collect();
        if let Some(p) = self.index_parent.get(res) {
            out.push(p.clone());
        }
        out
    }

    fn is_ancestor(&self, anc: &ResourceId, of: &ResourceId) -> bool {
        let mut stack = self.parents(of);
        while let Some(p) = stack.pop() {
            if &p == anc {
                return true;
            }
            stack.extend(self.parents(&p));
        }
        false
    }

    fn depth(&self, res: &ResourceId) -> usize {
        self.parents(res).iter().map(|p| self.depth(p) + 1).max().unwrap_or(0)
    }

    pub fn holds(&self, txn: TxnId, res: &ResourceId) -> Option<LockMode> {
        self.resources.get(res)?.granted.iter().find(|h| h.txn == txn).map(|h| h.mode)
    }

    /// Every `(txn, mode)` currently granted on `res`.
    pub fn holders(&self, res: &ResourceId) -> Vec<(TxnId, LockMode)> {
        self.resources.get(res).map_or_else(Vec::new, |e| e.granted.iter().map(|h| (h.txn, h.mode)).collect())
    }

    /// Every resource lock currently granted, as `(resource, txn, mode)`.
    pub fn grants(&self) -> impl Iterator<Item = (&ResourceId, TxnId, LockMode)> + '_ {
        self.resources.iter().flat_map(|(r, e)| e.granted.iter().map(move |h| (r, h.txn, h.mode)))
    }

    pub fn is_blocked(&self, txn: TxnId) -> bool {
        self.resources.values().any(|e| e.queue.iter().any(|w| w.txn == txn))
            || self.predicates.values().any(|e| e.queue.iter().any(|w| w.txn == txn))
    }

    pub fn acquire(&mut self, txn: TxnId, res: &ResourceId, mode: LockMode, duration: Duration) -> Result<LockOutcome, LockError> {
        if !self.is_active(txn) {
            return Err(LockError::TxnNotActive(txn));
        }
        for parent in self.parents(res) {
            let ok = self.holds(txn, &parent).is_some_and(|held| mode.parent_allows(held));
            if !ok {
                return Err(LockError::AncestorIntentionMissing { resource: res.clone(), parent });
            }
        }
        let target = Some(Target::Resource(res.clone()));
        let entry = self.resources.entry(res.clone()).or_default();
        if entry.queue.iter().any(|w| w.txn == txn) {
            return Ok(LockOutcome::Blocked);
        }
        let own = entry.granted.iter().position(|h| h.txn == txn);
        let wanted = own.map_or(mode, |i| entry.granted[i].mode.join(mode));
        let clear_of_holders = entry.granted.iter().all(|h| h.txn == txn || compatible(h.mode, wanted));
        let grant = match own {
            Some(_) => clear_of_holders,
            None => clear_of_holders && entry.queue.iter().all(|w| compatible(w.mode, wanted)),
        };
        if grant {
            match own {
                Some(i) => {
                    let h = &mut entry.granted[i];
                    h.mode = wanted;
                    h.duration = h.duration.max(duration);
                }
                None => entry.granted.push(Holder { txn, mode: wanted, duration }),
            }
            self.held.entry(txn).or_default().insert(res.clone());
            self.log(txn, LockEventKind::Acquire, target.clone(), Some(mode), Some(duration));
            self.log(txn, LockEventKind::Grant, target, Some(wanted), Some(duration));
            Ok(LockOutcome::Granted)
        } else {
            entry.queue.push_back(Holder { txn, mode: wanted, duration });
            self.log(txn, LockEventKind::Acquire, target.clone(), Some(mode), Some(duration));
            self.log(txn, LockEventKind::Block, target, Some(wanted), Some(duration));
            Ok(LockOutcome::Blocked)
        }
    }

    pub fn predicate_acquire(&mut self, txn: TxnId, pred: &Predicate, mode: LockMode, duration: Duration) -> Result<LockOutcome, LockError> {
        if !self.is_active(txn) {
            return Err(LockError::TxnNotActive(txn));
        }
        if !matches!(mode, LockMode::S | LockMode::X) {
            return Err(LockError::PredicateMode(mode));
        }
        pred.validate()?;
        let target = Some(Target::Predicate(pred.clone()));
        let entry = self.predicates.entry(pred.table.clone()).or_default();
        if entry.queue.iter().any(|w| w.txn == txn) {
            return Ok(LockOutcome::Blocked);
        }
        if let Some(h) = entry.granted.iter_mut().find(|h| h.txn == txn && &h.pred == pred && h.mode.covers(mode)) {
            h.duration = h.duration.max(duration);
            return Ok(LockOutcome::Granted);
        }
        let conflicts = entry.granted.iter().chain(entry.queue.iter()).any(|h| h.txn != txn && pred_conflict(h, pred, mode));
        let holder = PredHolder { txn, pred: pred.clone(), mode, duration };
        self.log(txn, LockEventKind::Acquire, target.clone(), Some(mode), Some(duration));
        if conflicts {
            self.predicates.get_mut(&pred.table).expect("entry").queue.push_back(holder);
            self.log(txn, LockEventKind::Block, target, Some(mode), Some(duration));
            Ok(LockOutcome::Blocked)
        } else {
            self.predicates.get_mut(&pred.table).expect("entry").granted.push(holder);
            self.log(txn, LockEventKind::Grant, target, Some(mode), Some(duration));
            Ok(LockOutcome::Granted)
        }
    }

    /// Releases one resource lock. Locks below it must already be released,
    /// and under the strict policy a long lock is kept until termination.
    pub fn release(&mut self, txn: TxnId, res: &ResourceId) -> Result<Vec<Woken>, LockError> {
        let Some(info) = self.txns.get(&txn).copied() else {
            return Err(LockError::TxnNotActive(txn));
        };
        let holder = self
            .resources
            .get(res)
            .and_then(|e| e.granted.iter().find(|h| h.txn == txn))
            .cloned()
            .ok_or_else(|| LockError::NoSuchGrant { txn, resource: res.clone() })?;
        let below = self.held.get(&txn).is_some_and(|set| set.iter().any(|r| self.is_ancestor(res, r)));
        if below {
            return Err(LockError::DescendantsHeld(res.clone()));
        }
        if info.policy == Policy::Strict && holder.duration == Duration::Long {
            return Err(LockError::TwoPhaseViolation(txn));
        }
        Ok(self.drop_grant(txn, res, LockEventKind::Release))
    }

    /// Releases `res` only if the grant is short; long grants stay.
    pub fn release_short(&mut self, txn: TxnId, res: &ResourceId) -> Result<Vec<Woken>, LockError> {
        let short = self
            .resources
            .get(res)
            .and_then(|e| e.granted.iter().find(|h| h.txn == txn))
            .is_some_and(|h| h.duration == Duration::Short);
        if short {
            self.release(txn, res)
        } else {
            Ok(Vec::new())
        }
    }

    /// Releases the short predicate grants `txn` holds on `pred`.
    pub fn release_short_predicate(&mut self, txn: TxnId, pred: &Predicate) -> Vec<Woken> {
        let Some(entry) = self.predicates.get_mut(&pred.table) else {
            return Vec::new();
        };
        let before = entry.granted.len();
        entry.granted.retain(|h| !(h.txn == txn && &h.pred == pred && h.duration == Duration::Short));
        if entry.granted.len() == before {
            return Vec::new();
        }
        self.log(txn, LockEventKind::Release, Some(Target::Predicate(pred.clone())), None, None);
        self.pump_predicates(&pred.table.clone())
    }

    fn drop_grant(&mut self, txn: TxnId, res: &ResourceId, kind: LockEventKind) -> Vec<Woken> {
        if let Some(entry) = self.resources.get_mut(res) {
            entry.granted.retain(|h| h.txn != txn);
        }
        if let Some(set) = self.held.get_mut(&txn) {
            set.remove(res);
        }
        self.log(txn, kind, Some(Target::Resource(res.clone())), None, None);
        self.pump(res)
    }

    /// Grants queued requests on `res` that no longer conflict.
    fn pump(&mut self, res: &ResourceId) -> Vec<Woken> {
        let mut woken = Vec::new();
        let Some(entry) = self.resources.get_mut(res) else {
            return woken;
        };
        let mut still_waiting: Vec<Holder> = Vec::new();
        let mut newly: Vec<Holder> = Vec::new();
        for w in core::mem::take(&mut entry.queue) {
            let ok = entry.granted.iter().all(|h| h.txn == w.txn || compatible(h.mode, w.mode))
                && still_waiting.iter().all(|e| e.txn == w.txn || compatible(e.mode, w.mode));
            if ok {
                match entry.granted.iter_mut().find(|h| h.txn == w.txn) {
                    Some(h) => {
                        h.mode = w.mode;
                        h.duration = h.duration.max(w.duration);
                    }
                    None => entry.granted.push(w.clone()),
                }
                newly.push(w);
            } else {
                still_waiting.push(w);
            }
        }
        entry.queue = still_waiting.into();
        if entry.granted.is_empty() && entry.queue.is_empty() {
            self.resources.remove(res);
        }
        for w in newly {
            self.held.entry(w.txn).or_default().insert(res.clone());
            let target = Target::Resource(res.clone());
            self.log(w.txn, LockEventKind::Grant, Some(target.clone()), Some(w.mode), Some(w.duration));
            woken.push(Woken { txn: w.txn, target });
        }
        woken
    }

    fn pump_predicates(&mut self, table: &str) -> Vec<Woken> {
        let mut woken = Vec::new();
        let Some(entry) = self.predicates.get_mut(table) else {
            return woken;
        };
        let mut still_waiting: Vec<PredHolder> = Vec::new();
        let mut newly = Vec::new();
        for w in core::mem::take(&mut entry.queue) {
            let blocked = entry.granted.iter().chain(still_waiting.iter()).any(|h| h.txn != w.txn && pred_conflict(h, &w.pred, w.mode));
            if blocked {
                still_waiting.push(w);
            } else {
                entry.granted.push(w.clone());
                newly.push(w);
            }
        }
        entry.queue = still_waiting.into();
        for w in newly {
            let target = Target::Predicate(w.pred);
            self.log(w.txn, LockEventKind::Grant, Some(target.clone()), Some(w.mode), Some(w.duration));
            woken.push(Woken { txn: w.txn, target });
        }
        woken
    }

    /// Releases everything `txn` holds or waits for, leaves before ancestors,
    /// and ends the transaction.
    pub fn release_all(&mut self, txn: TxnId) -> Vec<Woken> {
        self.terminate(txn, LockEventKind::Release)
    }

    /// Like [`release_all`](Self::release_all) but traced as an abort.
    pub fn abort(&mut self, txn: TxnId) -> Vec<Woken> {
        self.terminate(txn, LockEventKind::Abort)
    }

    fn terminate(&mut self, txn: TxnId, kind: LockEventKind) -> Vec<Woken> {
        let mut woken = Vec::new();
        if kind == LockEventKind::Abort {
            self.log(txn, kind, None, None, None);
        }
        // withdraw queued requests first so they are not granted below
        let queued: Vec<ResourceId> =
            self.resources.iter().filter(|(_, e)| e.queue.iter().any(|w| w.txn == txn)).map(|(r, _)| r.clone()).collect();
        for r in queued {
            self.resources.get_mut(&r).expect("present").queue.retain(|w| w.txn != txn);
            woken.extend(self.pump(&r));
        }
        let mut mine: Vec<ResourceId> = self.held.remove(&txn).unwrap_or_default().into_iter().collect();
        mine.sort_by_key(|r| core::cmp::Reverse(self.depth(r)));
        self.held.insert(txn, BTreeSet::new());
        for r in mine {
            woken.extend(self.drop_grant(txn, &r, LockEventKind::Release));
        }
        self.held.remove(&txn);
        let tables: Vec<String> = self
            .predicates
            .iter()
            .filter(|(_, e)| e.granted.iter().chain(e.queue.iter()).any(|h| h.txn == txn))
            .map(|(t, _)| t.clone())
            .collect();
        for t in tables {
            let entry = self.predicates.get_mut(&t).expect("present");
            let released: Vec<Predicate> = entry.granted.iter().filter(|h| h.txn == txn).map(|h| h.pred.clone()).collect();
            entry.granted.retain(|h| h.txn != txn);
            entry.queue.retain(|h| h.txn != txn);
            for p in released {
                self.log(txn, LockEventKind::Release, Some(Target::Predicate(p)), None, None);
            }
            woken.extend(self.pump_predicates(&t));
        }
        self.txns.remove(&txn);
        woken.retain(|w| w.txn != txn);
        woken
    }

    /// Waiter -> blocker edges: a queued request waits for every holder and
    /// every earlier queued request it is incompatible with.
    pub fn waits_for(&self) -> BTreeMap<TxnId, BTreeSet<TxnId>> {
        let mut g: BTreeMap<TxnId, BTreeSet<TxnId>> = BTreeMap::new();
        for entry in self.resources.values() {
            for (i, w) in entry.queue.iter().enumerate() {
                let blockers = entry
                    .granted
                    .iter()
                    .chain(entry.queue.iter().take(i))
                    .filter(|h| h.txn != w.txn && !compatible(h.mode, w.mode))
                    .map(|h| h.txn);
                g.entry(w.txn).or_default().extend(blockers);
            }
        }
        for entry in self.predicates.values() {
            for (i, w) in entry.queue.iter().enumerate() {
                let blockers = entry
                    .granted
                    .iter()
                    .chain(entry.queue.iter().take(i))
                    .filter(|h| h.txn != w.txn && pred_conflict(h, &w.pred, w.mode))
                    .map(|h| h.txn);
                g.entry(w.txn).or_default().extend(blockers);
            }
        }
        g.retain(|_, v| !v.is_empty());
        g
    }

    /// All simple cycles of the waits-for graph, each rotated to start at its
    /// smallest transaction id.
    pub fn detect_deadlocks(&self) -> Vec<Vec<TxnId>> {
        simple_cycles(&self.waits_for())
    }

    /// Some cycle of the waits-for graph, if any.
    pub fn find_cycle(&self) -> Option<Vec<TxnId>> {
        cycle_in(&self.waits_for())
    }

    /// Aborts the youngest member of each cycle until none remain.
    /// Returns the victims and the requests granted along the way.
    pub fn resolve_deadlocks(&mut self) -> (Vec<TxnId>, Vec<Woken>) {
        let mut victims = Vec::new();
        let mut woken = Vec::new();
        while let Some(cycle) = self.find_cycle() {
            let victim = *cycle.iter().max_by_key(|t| self.start_seq(**t).unwrap_or(0)).expect("non-empty cycle");
            woken.extend(self.abort(victim));
            victims.push(victim);
        }
        woken.retain(|w| !victims.contains(&w.txn));
        (victims, woken)
    }
}

/// Every simple cycle of `g`, each starting at its smallest member.
pub fn simple_cycles(g: &BTreeMap<TxnId, BTreeSet<TxnId>>) -> Vec<Vec<TxnId>> {
    fn dfs(
        g: &BTreeMap<TxnId, BTreeSet<TxnId>>,
        start: TxnId,
        path: &mut Vec<TxnId>,
        out: &mut Vec<Vec<TxnId>>,
    ) {
        let last = *path.last().expect("non-empty");
        for &next in g.get(&last).into_iter().flatten() {
            if next == start {
                out.push(path.clone());
            } else if next > start && !path.contains(&next) {
                path.push(next);
                dfs(g, start, path, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    for &start in g.keys() {
        let mut path = alloc::vec![start];
        dfs(g, start, &mut path, &mut out);
    }
    out
}

/// Some cycle of `g`, if there is one.
pub fn cycle_in(g: &BTreeMap<TxnId, BTreeSet<TxnId>>) -> Option<Vec<TxnId>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        Grey,
        Black,
    }
    let mut color: BTreeMap<TxnId, Color> = BTreeMap::new();
    for &root in g.keys() {
        if color.contains_key(&root) {
            continue;
        }
        // iterative DFS: (node, neighbour iterator position)
        let mut stack: Vec<(TxnId, Vec<TxnId>)> = Vec::new();
        let mut path: Vec<TxnId> = Vec::new();
        color.insert(root, Color::Grey);
        path.push(root);
        stack.push((root, g.get(&root).map(|s| s.iter().rev().copied().collect()).unwrap_or_default()));
        while let Some((node, pending)) = stack.last_mut() {
            match pending.pop() {
                Some(next) => match color.get(&next) {
                    Some(Color::Grey) => {
                        let at = path.iter().position(|t| *t == next).expect("grey nodes are on the path");
                        return Some(path[at..].to_vec());
                    }
                    Some(Color::Black) => {}
                    None => {
                        color.insert(next, Color::Grey);
                        path.push(next);
                        stack.push((next, g.get(&next).map(|s| s.iter().rev().copied().collect()).unwrap_or_default()));
                    }
                },
                None => {
                    color.insert(*node, Color::Black);
                    path.pop();
                    stack.pop();
                }
            }
        }
    }
    None
}
