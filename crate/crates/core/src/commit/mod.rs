//! Atomic commitment over the simulated network.
//!
//! Each protocol is a set of [`Node`](crate::sim::Node) state machines run by
//! [`SimNet`](crate::sim::SimNet). All of them start with a client asking
//! `tm0` to commit, and all fault outcomes (blocking, aborts, disagreement)
//! are reported as data in [`Outcome`], never as errors.

mod explore;
mod hazard;
mod paxos;
mod paxos_commit;
mod three_pc;
mod two_pc;

pub use explore::{explore, random_schedules, ExploreReport, ExploreSpace};
pub use hazard::{spontaneous_prepare, HazardOutcome};
pub use paxos::{run_paxos, Ballot, PaxosOutcome, Proposal};
pub use paxos_commit::{run_paxos_commit, Variant};
pub use three_pc::run_3pc_backup;
pub use two_pc::run_2pc;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::sim::{count_delays, count_delays_with_initiation, count_messages, Decision, Pid, SimResult, TraceEvent};

/// Ticks a process waits before acting on missing replies.
pub const TIMEOUT: u64 = 10;

const T_VOTES: u32 = 1;
const T_POLL: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Vote {
    Prepared,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("at least one resource manager is required")]
    NoResourceManagers,
    #[error("at least one backup transaction manager is required")]
    NoBackups,
    #[error("{acceptors} acceptors cannot tolerate {f} faults; exactly 2F+1 are required")]
    AcceptorCount { acceptors: usize, f: usize },
    #[error("acceptor count must be odd and positive, got {0}")]
    EvenAcceptors(usize),
    #[error("at least one proposal is required")]
    NoProposals,
}

/// Protocol selector used by the CLI and by schedule exploration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "protocol", rename_all = "kebab-case"))]
pub enum Protocol {
    TwoPhase,
    #[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
    ThreePhaseBackup { backups: usize, naive_takeover: bool },
    PaxosCommit { f: usize, variant: Variant },
}

impl Protocol {
    /// Transaction managers taking part (primary first).
    pub fn tms(&self) -> Vec<Pid> {
        let n = match *self {
            Protocol::TwoPhase => 1,
            Protocol::ThreePhaseBackup { backups, .. } => backups + 1,
            Protocol::PaxosCommit { f, .. } => if f == 0 { 1 } else { 2 },
        };
        (0..n as u8).map(Pid::Tm).collect()
    }

    pub fn acceptors(&self) -> Vec<Pid> {
        match *self {
            Protocol::PaxosCommit { f, .. } if f > 0 => (0..(2 * f + 1) as u8).map(Pid::Acceptor).collect(),
            _ => Vec::new(),
        }
    }
}

pub fn run_commit(protocol: Protocol, votes: &[Vote], sim: crate::sim::SimConfig) -> Result<Outcome, ConfigError> {
    match protocol {
        Protocol::TwoPhase => run_2pc(votes, sim),
        Protocol::ThreePhaseBackup { backups, naive_takeover } => run_3pc_backup(votes, backups, naive_takeover, sim),
        Protocol::PaxosCommit { f, variant } => run_paxos_commit(votes, f, 2 * f + 1, variant, sim),
    }
}

/// What one commit run produced.
#[derive(Clone, Debug)]
pub struct Outcome {
    /// Stable decision of every transaction and resource manager (`None` = undecided).
    pub decisions: BTreeMap<Pid, Option<Decision>>,
    pub votes: BTreeMap<Pid, Vote>,
    /// One-way delays on the longest causal chain ending in a resource
    /// manager's decision; `None` if no resource manager decided.
    pub delays: Option<u64>,
    pub delays_with_initiation: Option<u64>,
    pub messages: usize,
    /// Resource managers that are up but undecided when the run ends.
    pub blocked: BTreeSet<Pid>,
    pub down: BTreeSet<Pid>,
    pub violations: Vec<String>,
    pub trace: Vec<TraceEvent>,
    pub trace_hash: u64,
}

impl Outcome {
    fn from_sim<N>(r: SimResult<N>, votes: &[Vote], tms: &[Pid]) -> Self {
        let rms: Vec<Pid> = (0..votes.len() as u8).map(Pid::Rm).collect();
        let decisions = tms.iter().chain(&rms).map(|&p| (p, r.decision(p))).collect();
        let blocked = rms.iter().filter(|p| r.decision(**p).is_none() && !r.down.contains(p)).copied().collect();
        Outcome {
            decisions,
            votes: rms.iter().copied().zip(votes.iter().copied()).collect(),
            delays: count_delays(&r.trace).ok(),
            delays_with_initiation: count_delays_with_initiation(&r.trace).ok(),
            messages: count_messages(&r.trace),
            blocked,
            trace_hash: r.trace_hash(),
            down: r.down,
            violations: r.violations,
            trace: r.trace,
        }
    }

    /// No two processes decided differently.
    pub fn agreement(&self) -> bool {
        let decided: BTreeSet<Decision> = self.decisions.values().flatten().copied().collect();
        decided.len() <= 1
    }

    /// Commit only if every resource manager voted Prepared.
    pub fn validity(&self) -> bool {
        let committed = self.decisions.values().any(|d| *d == Some(Decision::Commit));
        !committed || self.votes.values().all(|v| *v == Vote::Prepared)
    }

    /// Stable decisions were never revised.
    pub fn stable(&self) -> bool {
        self.violations.is_empty()
    }

    /// The common decision of the resource managers, if they all reached one.
    pub fn rm_decision(&self) -> Option<Decision> {
        let mut rms = self.decisions.iter().filter(|(p, _)| matches!(p, Pid::Rm(_))).map(|(_, d)| *d);
        let first = rms.next()??;
        rms.all(|d| d == Some(first)).then_some(first)
    }
}

fn rm_pids(n: usize) -> Vec<Pid> {
    (0..n as u8).map(Pid::Rm).collect()
}

fn rm_index(p: Pid) -> u8 {
    match p {
        Pid::Rm(i) => i,
        _ => u8::MAX,
    }
}
