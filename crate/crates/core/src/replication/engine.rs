//! Tick-driven simulation of one replication strategy.
//!
//! Transactions arrive at nodes, update `ops_per_txn` distinct items in turn
//! under exclusive locks and commit. Where a write must lock depends on the
//! strategy: every replica (eager everywhere, remote copies a tick after the
//! local one), the item's primary (primary copy), or only the origin (lazy
//! everywhere). Lazy strategies ship committed writes to the other replicas
//! with a random lag. Deadlocks are found on the global waits-for graph
//! each tick and broken by aborting the youngest transaction.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Item, LazyApply, Metrics, NodeState, ReplicaWrite, ReplicationConfig, ReplicationError, Strategy, ThomasApply};
use crate::history::History;
use crate::lock::cycle_in;
use crate::types::{TxnId, Value};

/// A scripted transaction: starts at `tick` on `origin` and updates `items` in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arrival {
    pub tick: u64,
    pub origin: usize,
    pub items: Vec<Item>,
}

#[derive(Clone, Debug)]
pub struct ReplicationRun {
    pub metrics: Metrics,
    pub nodes: Vec<NodeState>,
    pub history: Option<History>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Start,
    AwaitFirst,
    Propagate { at: u64 },
    AwaitRest,
    Working { until: u64 },
}

#[derive(Clone, Debug)]
struct Txn {
    origin: usize,
    items: Vec<Item>,
    step: usize,
    stage: Stage,
    granted: BTreeSet<(usize, Item)>,
    held: Vec<(usize, Item)>,
    /// `(item, old, new)` per completed write.
    writes: Vec<(Item, i64, i64)>,
}

#[derive(Clone, Debug, Default)]
struct LockQ {
    holder: Option<TxnId>,
    queue: VecDeque<TxnId>,
}

enum Source {
    /// Poisson arrivals: `next` holds each stream's next arrival time.
    Random { next: Vec<f64>, gaps: ChaCha8Rng, keys: ChaCha8Rng, origins: ChaCha8Rng },
    Script(VecDeque<Arrival>),
}

fn initial(item: Item) -> i64 {
    -i64::from(item) - 1
}

fn exp_gap(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    -libm::log(1.0 - rng.random::<f64>()) / rate
}

fn key_name(item: Item) -> alloc::string::String {
    format!("r/{item}")
}

struct Sim {
    cfg: ReplicationConfig,
    nodes: Vec<NodeState>,
    txns: BTreeMap<TxnId, Txn>,
    locks: BTreeMap<(usize, Item), LockQ>,
    in_flight: BTreeMap<(u64, u64), (usize, ReplicaWrite)>,
    latest: BTreeMap<Item, i64>,
    lag: ChaCha8Rng,
    next_txn: u64,
    next_value: i64,
    next_write: u64,
    commit_seq: u64,
    fresh: Item,
    m: Metrics,
    history: Option<History>,
}

impl Sim {
    fn primary(&self, item: Item) -> usize {
        item as usize % self.cfg.nodes
    }

    /// Where the first lock is taken, then the replicas locked a tick later.
    fn lock_plan(&self, origin: usize, item: Item) -> (usize, Vec<usize>) {
        match self.cfg.strategy {
            Strategy::EagerEverywhere => (origin, (0..self.cfg.nodes).filter(|n| *n != origin).collect()),
            Strategy::LazyEverywhere => (origin, Vec::new()),
            Strategy::EagerPrimary | Strategy::LazyPrimary => (self.primary(item), Vec::new()),
        }
    }

    fn spawn(&mut self, origin: usize, items: Vec<Item>) {
        for &i in &items {
            if !self.nodes[0].replicas.contains_key(&i) {
                for n in &mut self.nodes {
                    n.replicas.insert(i, super::Replica { value: initial(i), max_ts: 0 });
                }
            }
        }
        self.next_txn += 1;
        let id = TxnId(self.next_txn);
        if let Some(h) = self.history.as_mut() {
            h.begin(id);
        }
        self.txns.insert(
            id,
            Txn { origin, items, step: 0, stage: Stage::Start, granted: BTreeSet::new(), held: Vec::new(), writes: Vec::new() },
        );
    }

    fn request(&mut self, id: TxnId, at: (usize, Item)) {
        let q = self.locks.entry(at).or_default();
        let t = self.txns.get_mut(&id).expect("live");
        if q.holder.is_none() && q.queue.is_empty() {
            q.holder = Some(id);
            t.granted.insert(at);
        } else {
            q.queue.push_back(id);
        }
        t.held.push(at);
    }

    fn release(&mut self, id: TxnId, at: (usize, Item)) {
        let Some(q) = self.locks.get_mut(&at) else { return };
        if q.holder == Some(id) {
            q.holder = q.queue.pop_front();
            if let Some(next) = q.holder {
                self.txns.get_mut(&next).expect("queued txns are live").granted.insert(at);
            }
        } else {
            q.queue.retain(|t| *t != id);
        }
        if q.holder.is_none() && q.queue.is_empty() {
            self.locks.remove(&at);
        }
    }

    fn step(&mut self, id: TxnId, tick: u64) {
        loop {
            let t = &self.txns[&id];
            let item = t.items[t.step];
            let (first, rest) = self.lock_plan(t.origin, item);
            match t.stage {
                Stage::Start => {
                    self.txns.get_mut(&id).expect("live").stage = Stage::AwaitFirst;
                    self.request(id, (first, item));
                }
                Stage::AwaitFirst if t.granted.contains(&(first, item)) => {
                    let next = if rest.is_empty() { self.start_write(id, tick) } else { Stage::Propagate { at: tick + 1 } };
                    self.txns.get_mut(&id).expect("live").stage = next;
                }
                Stage::Propagate { at } if tick >= at => {
                    self.txns.get_mut(&id).expect("live").stage = Stage::AwaitRest;
                    for n in rest {
                        self.request(id, (n, item));
                    }
                }
                Stage::AwaitRest if rest.iter().all(|n| t.granted.contains(&(*n, item))) => {
                    let next = self.start_write(id, tick);
                    self.txns.get_mut(&id).expect("live").stage = next;
                }
                Stage::Working { until } if tick >= until => {
                    let t = self.txns.get_mut(&id).expect("live");
                    t.step += 1;
                    if t.step == t.items.len() {
                        self.commit(id, tick);
                        return;
                    }
                    t.stage = Stage::Start;
                }
                _ => return,
            }
        }
    }

    /// Performs the current write and returns the stage that waits it out.
    fn start_write(&mut self, id: TxnId, tick: u64) -> Stage {
        let t = &self.txns[&id];
        let item = t.items[t.step];
        let (first, _) = self.lock_plan(t.origin, item);
        let old = self.nodes[first].value(item).expect("full replicas");
        if self.latest.get(&item).copied().unwrap_or(initial(item)) != old {
            self.m.stale_reads += 1;
        }
        self.next_value += 1;
        let new = self.next_value;
        let targets: Vec<usize> = match self.cfg.strategy {
            Strategy::EagerEverywhere | Strategy::EagerPrimary => (0..self.cfg.nodes).collect(),
            Strategy::LazyEverywhere | Strategy::LazyPrimary => alloc::vec![first],
        };
        for n in &targets {
            self.nodes[*n].set(item, new).expect("full replicas");
        }
        self.m.total_work += targets.len() as u64;
        if let Some(h) = self.history.as_mut() {
            h.read(id, key_name(item), Some(Value::Int(old)));
            h.write(id, key_name(item), Value::Int(new));
        }
        self.txns.get_mut(&id).expect("live").writes.push((item, old, new));
        // eager primary pays one round of synchronous fan-out per write
        let fan_out = u64::from(self.cfg.strategy == Strategy::EagerPrimary);
        Stage::Working { until: tick + self.cfg.action_time + fan_out }
    }

    fn commit(&mut self, id: TxnId, tick: u64) {
        let t = self.txns.remove(&id).expect("live");
        for at in &t.held {
            self.release(id, *at);
        }
        self.commit_seq += 1;
        for &(item, old, new) in &t.writes {
            self.latest.insert(item, new);
            if self.cfg.strategy.propagation() == super::Propagation::Lazy {
                let from = if self.cfg.strategy == Strategy::LazyEverywhere { t.origin } else { self.primary(item) };
                for n in (0..self.cfg.nodes).filter(|n| *n != from) {
                    self.next_write += 1;
                    let w = ReplicaWrite { id: self.next_write, item, old, new, ts: self.commit_seq, origin: from };
                    let due = tick + self.lag.random_range(1..=self.cfg.max_lag);
                    self.in_flight.insert((due, self.next_write), (n, w));
                }
            }
        }
        self.m.committed += 1;
        if let Some(h) = self.history.as_mut() {
            h.commit(id);
        }
    }

    fn abort(&mut self, id: TxnId) {
        let t = self.txns.remove(&id).expect("live");
        for &(item, old, _) in t.writes.iter().rev() {
            let targets: Vec<usize> = match self.cfg.strategy {
                Strategy::EagerEverywhere | Strategy::EagerPrimary => (0..self.cfg.nodes).collect(),
                Strategy::LazyEverywhere => alloc::vec![t.origin],
                Strategy::LazyPrimary => alloc::vec![self.primary(item)],
            };
            for n in targets {
                self.nodes[n].set(item, old).expect("full replicas");
            }
        }
        for at in &t.held {
            self.release(id, *at);
        }
        self.m.aborted += 1;
        if let Some(h) = self.history.as_mut() {
            h.abort(id);
        }
    }

    fn resolve_deadlocks(&mut self) {
        loop {
            let mut g: BTreeMap<TxnId, BTreeSet<TxnId>> = BTreeMap::new();
            for q in self.locks.values().filter(|q| !q.queue.is_empty()) {
                for (i, w) in q.queue.iter().enumerate() {
                    let out = g.entry(*w).or_default();
                    out.extend(q.holder);
                    out.extend(q.queue.iter().take(i));
                }
            }
            let Some(cycle) = cycle_in(&g) else { return };
            let victim = *cycle.iter().max().expect("non-empty cycle");
            self.m.deadlocks += 1;
            self.abort(victim);
        }
    }

    fn deliver(&mut self, tick: u64) {
        while let Some(entry) = self.in_flight.first_entry() {
            if entry.key().0 > tick {
                break;
            }
            let (n, w) = entry.remove();
            self.m.total_work += 1;
            match self.cfg.strategy {
                Strategy::LazyEverywhere => match self.nodes[n].apply_lazy(&w).expect("full replicas") {
                    LazyApply::Applied => {}
                    LazyApply::ReconciliationNeeded { duplicate: true } => self.m.duplicates += 1,
                    LazyApply::ReconciliationNeeded { duplicate: false } => self.m.reconciliations += 1,
                },
                _ => {
                    if self.nodes[n].apply_thomas(&w).expect("full replicas") == ThomasApply::Skipped {
                        self.m.skipped += 1;
                    }
                }
            }
        }
    }
}

fn simulate(cfg: &ReplicationConfig, mut source: Source) -> Result<ReplicationRun, ReplicationError> {
    cfg.validate()?;
    let db = cfg.db_size as Item;
    let record = cfg.record_history && !cfg.insert_only && cfg.strategy.propagation() == super::Propagation::Eager;
    let history = record.then(|| {
        let mut h = History::new();
        h.load((0..db).map(|i| (key_name(i), Value::Int(initial(i)))));
        h
    });
    let mut sim = Sim {
        nodes: (0..cfg.nodes).map(|n| NodeState::base(n, 0..db, initial)).collect(),
        txns: BTreeMap::new(),
        locks: BTreeMap::new(),
        in_flight: BTreeMap::new(),
        latest: BTreeMap::new(),
        lag: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1a9),
        next_txn: 0,
        next_value: 0,
        next_write: 0,
        commit_seq: 0,
        fresh: db,
        m: Metrics { duration: cfg.duration, ..Default::default() },
        history,
        cfg: cfg.clone(),
    };
    let limit = cfg.duration * 20 + 10_000;
    let mut busy = 0u64;
    let mut tick = 0;
    while tick < cfg.duration || !sim.txns.is_empty() || !sim.in_flight.is_empty() {
        if tick > limit {
            return Err(ReplicationError::Config("simulation did not drain"));
        }
        sim.deliver(tick);
        if tick < cfg.duration {
            match &mut source {
                Source::Random { next, gaps, keys, origins } => {
                    for node in 0..next.len() {
                        while next[node] < (tick + 1) as f64 {
                            next[node] += exp_gap(gaps, cfg.txn_rate);
                            let origin = if cfg.total_load { origins.random_range(0..cfg.nodes) } else { node };
                            let items = if cfg.insert_only {
                                let start = sim.fresh;
                                sim.fresh += cfg.ops_per_txn as Item;
                                (start..sim.fresh).collect()
                            } else {
                                let mut items: Vec<Item> = Vec::with_capacity(cfg.ops_per_txn);
                                while items.len() < cfg.ops_per_txn {
                                    let i = keys.random_range(0..db);
                                    if !items.contains(&i) {
                                        items.push(i);
                                    }
                                }
                                items
                            };
                            sim.spawn(origin, items);
                        }
                    }
                }
                Source::Script(script) => {
                    while script.front().is_some_and(|a| a.tick <= tick) {
                        let a = script.pop_front().expect("checked");
                        sim.spawn(a.origin, a.items);
                    }
                }
            }
            busy += sim.txns.len() as u64;
        }
        let ids: Vec<TxnId> = sim.txns.keys().copied().collect();
        for id in ids {
            if sim.txns.contains_key(&id) {
                sim.step(id, tick);
            }
        }
        sim.resolve_deadlocks();
        tick += 1;
    }
    sim.m.concurrency = busy as f64 / cfg.duration as f64;
    let first = sim.nodes[0].values();
    sim.m.converged = sim.nodes.iter().all(|n| n.values() == first);
    Ok(ReplicationRun { metrics: sim.m, nodes: sim.nodes, history: sim.history })
}

/// Runs the strategy against a seeded random workload.
pub fn run_replication(cfg: &ReplicationConfig) -> Result<ReplicationRun, ReplicationError> {
    let mut gaps = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xacc);
    let streams = if cfg.total_load { 1 } else { cfg.nodes };
    let next = (0..streams).map(|_| exp_gap(&mut gaps, cfg.txn_rate)).collect();
    let source = Source::Random {
        next,
        gaps,
        keys: ChaCha8Rng::seed_from_u64(cfg.seed),
        origins: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0219),
    };
    simulate(cfg, source)
}

/// Runs scripted arrivals (sorted by tick) instead of a random workload.
pub fn run_script(cfg: &ReplicationConfig, mut arrivals: Vec<Arrival>) -> Result<ReplicationRun, ReplicationError> {
    if arrivals.iter().any(|a| a.origin >= cfg.nodes || a.items.iter().any(|i| *i as usize >= cfg.db_size)) {
        return Err(ReplicationError::Config("scripted arrival outside the configured nodes or items"));
    }
    arrivals.sort_by_key(|a| a.tick);
    simulate(cfg, Source::Script(arrivals.into()))
}
