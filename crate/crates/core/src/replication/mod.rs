//! Replicated databases: the four update strategies, replica write rules,
//! two-tier replication and scaling measurements.
//!
//! Items are numbered `0..db_size` and hold integers. Each node keeps a full
//! replica unless it is a mobile node with a partial mask.

mod demo;
mod engine;
mod sweep;
mod two_tier;

pub use demo::{eager_deadlock_demo, lazy_inconsistency_demo, DeliveryOrder, InconsistencyDemo};
pub use engine::{run_replication, run_script, Arrival, ReplicationRun};
pub use sweep::{loglog_slope, scaling_sweep, summarize, Sweep, SweepAxis, SweepPoint};
pub use two_tier::{exact, MobileTxn, Program, RoundTrip, TwoTier, TxnMode, TxnResult};

use alloc::collections::{BTreeMap, BTreeSet};
use core::fmt;
use core::str::FromStr;

pub type Item = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Propagation {
    Eager,
    Lazy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ownership {
    UpdateEverywhere,
    PrimaryCopy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Strategy {
    EagerEverywhere,
    EagerPrimary,
    LazyEverywhere,
    LazyPrimary,
}

impl Strategy {
    pub const ALL: [Strategy; 4] =
        [Strategy::EagerEverywhere, Strategy::EagerPrimary, Strategy::LazyEverywhere, Strategy::LazyPrimary];

    pub fn propagation(self) -> Propagation {
        match self {
            Strategy::EagerEverywhere | Strategy::EagerPrimary => Propagation::Eager,
            Strategy::LazyEverywhere | Strategy::LazyPrimary => Propagation::Lazy,
        }
    }

    pub fn ownership(self) -> Ownership {
        match self {
            Strategy::EagerEverywhere | Strategy::LazyEverywhere => Ownership::UpdateEverywhere,
            Strategy::EagerPrimary | Strategy::LazyPrimary => Ownership::PrimaryCopy,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::EagerEverywhere => "eager-everywhere",
            Strategy::EagerPrimary => "eager-primary",
            Strategy::LazyEverywhere => "lazy-everywhere",
            Strategy::LazyPrimary => "lazy-primary",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown strategy {0:?}")]
pub struct UnknownStrategy(pub alloc::string::String);

impl FromStr for Strategy {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| UnknownStrategy(s.into()))
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ReplicationError {
    #[error("node holds no replica of item {0}")]
    NoReplica(Item),
    #[error("mobile node must be disconnected")]
    NotDisconnected,
    #[error("invalid configuration: {0}")]
    Config(&'static str),
}

/// A write shipped to a replica. It carries the value the writer saw
/// (`old`) as well as the value it wrote, so the receiver can tell whether
/// the two copies diverged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ReplicaWrite {
    /// Globally unique; lets receivers recognise redelivery.
    pub id: u64,
    pub item: Item,
    pub old: i64,
    pub new: i64,
    pub ts: u64,
    pub origin: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tier {
    Base,
    Mobile,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Replica {
    pub value: i64,
    pub max_ts: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeState {
    pub id: usize,
    pub tier: Tier,
    pub connected: bool,
    pub replicas: BTreeMap<Item, Replica>,
    applied: BTreeSet<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LazyApply {
    Applied,
    /// The replica no longer holds the writer's old value. `duplicate` is set
    /// when the same write was already applied here.
    ReconciliationNeeded { duplicate: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThomasApply {
    Applied,
    Skipped,
}

impl NodeState {
    /// A base node holding `items`, all initialised by `init`.
    pub fn base(id: usize, items: impl IntoIterator<Item = Item>, init: impl Fn(Item) -> i64) -> Self {
        NodeState {
            id,
            tier: Tier::Base,
            connected: true,
            replicas: items.into_iter().map(|i| (i, Replica { value: init(i), max_ts: 0 })).collect(),
            applied: BTreeSet::new(),
        }
    }

    pub fn value(&self, item: Item) -> Option<i64> {
        self.replicas.get(&item).map(|r| r.value)
    }

    fn replica(&mut self, item: Item) -> Result<&mut Replica, ReplicationError> {
        self.replicas.get_mut(&item).ok_or(ReplicationError::NoReplica(item))
    }

    /// Local write by a transaction running here.
    pub fn set(&mut self, item: Item, value: i64) -> Result<(), ReplicationError> {
        self.replica(item)?.value = value;
        Ok(())
    }

    /// Old-value check: apply only if the replica still holds `w.old`.
    pub fn apply_lazy(&mut self, w: &ReplicaWrite) -> Result<LazyApply, ReplicationError> {
        let seen = self.applied.contains(&w.id);
        let r = self.replica(w.item)?;
        if r.value == w.old && !seen {
            r.value = w.new;
            self.applied.insert(w.id);
            Ok(LazyApply::Applied)
        } else {
            Ok(LazyApply::ReconciliationNeeded { duplicate: seen })
        }
    }

    /// Thomas' write rule: apply only writes newer than any applied so far.
    pub fn apply_thomas(&mut self, w: &ReplicaWrite) -> Result<ThomasApply, ReplicationError> {
        let r = self.replica(w.item)?;
        if w.ts > r.max_ts {
            r.value = w.new;
            r.max_ts = w.ts;
            Ok(ThomasApply::Applied)
        } else {
            Ok(ThomasApply::Skipped)
        }
    }

    /// Item values only, for comparing replicas.
    pub fn values(&self) -> BTreeMap<Item, i64> {
        self.replicas.iter().map(|(k, r)| (*k, r.value)).collect()
    }
}

/// Parameters of one replication run. Rates are transactions per tick.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase", default))]
pub struct ReplicationConfig {
    pub strategy: Strategy,
    pub nodes: usize,
    /// Per-node arrival rate, or the system-wide rate when `total_load` is set.
    pub txn_rate: f64,
    pub ops_per_txn: usize,
    pub db_size: usize,
    pub duration: u64,
    pub seed: u64,
    /// Ticks to execute one write.
    pub action_time: u64,
    /// Lazy writes arrive 1 to `max_lag` ticks after commit.
    pub max_lag: u64,
    /// Every write creates a fresh item, so updates commute.
    pub insert_only: bool,
    /// Hold the system-wide arrival rate fixed instead of the per-node rate.
    pub total_load: bool,
    /// Keep a history of every operation (eager strategies, not insert-only).
    pub record_history: bool,
}

impl Default for ReplicationConfig {
    fn default() -> Self {
        ReplicationConfig {
            strategy: Strategy::EagerEverywhere,
            nodes: 4,
            txn_rate: 0.05,
            ops_per_txn: 4,
            db_size: 1000,
            duration: 2000,
            seed: 0,
            action_time: 1,
            max_lag: 5,
            insert_only: false,
            total_load: false,
            record_history: false,
        }
    }
}

impl ReplicationConfig {
    pub fn validate(&self) -> Result<(), ReplicationError> {
        let err = |m| Err(ReplicationError::Config(m));
        if self.nodes == 0 {
            return err("nodes must be positive");
        }
        if !(self.txn_rate.is_finite() && self.txn_rate > 0.0) {
            return err("txnRate must be positive");
        }
        if self.ops_per_txn == 0 || self.db_size < self.ops_per_txn {
            return err("opsPerTxn must be positive and at most dbSize");
        }
        if self.duration == 0 || self.action_time == 0 || self.max_lag == 0 {
            return err("duration, actionTime and maxLag must be positive");
        }
        if u32::try_from(self.db_size).is_err() || self.nodes > usize::from(u16::MAX) {
            return err("dbSize or nodes too large");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct Metrics {
    pub committed: u64,
    pub aborted: u64,
    pub deadlocks: u64,
    pub reconciliations: u64,
    /// Redelivered writes, kept apart from genuine reconciliations.
    pub duplicates: u64,
    /// Thomas-rule writes that arrived out of date.
    pub skipped: u64,
    pub stale_reads: u64,
    /// Replica write applications, counting the origin copy and every
    /// propagated copy whether or not it took effect.
    pub total_work: u64,
    /// Mean number of transactions in flight per tick.
    pub concurrency: f64,
    pub duration: u64,
    pub converged: bool,
}

impl Metrics {
    pub fn deadlock_rate(&self) -> f64 {
        self.deadlocks as f64 / self.duration as f64
    }

    pub fn reconciliation_rate(&self) -> f64 {
        self.reconciliations as f64 / self.duration as f64
    }
}
