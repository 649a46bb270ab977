//! Single-decree Paxos and the acceptor logic Paxos Commit reuses.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt::Debug;

use super::{ConfigError, TIMEOUT};
use crate::sim::{Message, Node, Out, Pid, SimConfig, SimNet, TraceEvent};

/// Ballot number, ordered by round and then by leader id. Ballot zero
/// belongs to a fixed proposer, which may skip phase 1 in it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Ballot {
    pub round: u32,
    pub leader: u8,
}

impl Ballot {
    pub const ZERO: Ballot = Ballot { round: 0, leader: 0 };
}

/// Stable per-instance acceptor state.
#[derive(Clone, Debug)]
pub(crate) struct AcceptorCore<V> {
    pub promised: BTreeMap<u8, Ballot>,
    pub accepted: BTreeMap<u8, (Ballot, V)>,
    /// Every acceptance ever made, for after-the-fact safety checks.
    pub log: Vec<(u8, Ballot, V)>,
}

impl<V> Default for AcceptorCore<V> {
    fn default() -> Self {
        AcceptorCore { promised: BTreeMap::new(), accepted: BTreeMap::new(), log: Vec::new() }
    }
}

impl<V: Clone> AcceptorCore<V> {
    /// Phase 1b: promises `ballot` for all `instances` or refuses with the
    /// highest conflicting promise.
    pub fn prepare(&mut self, ballot: Ballot, instances: &[u8]) -> Result<Vec<(u8, Option<(Ballot, V)>)>, Ballot> {
        if let Some(&p) = instances.iter().filter_map(|i| self.promised.get(i)).filter(|p| **p >= ballot).max() {
            return Err(p);
        }
        Ok(instances
            .iter()
            .map(|&i| {
                self.promised.insert(i, ballot);
                (i, self.accepted.get(&i).cloned())
            })
            .collect())
    }

    /// Phase 2b: accepts unless a higher ballot was promised.
    pub fn accept(&mut self, inst: u8, ballot: Ballot, value: V) -> Result<(), Ballot> {
        let promised = self.promised.get(&inst).copied().unwrap_or_default();
        if ballot < promised {
            return Err(promised);
        }
        self.promised.insert(inst, ballot);
        self.accepted.insert(inst, (ballot, value.clone()));
        self.log.push((inst, ballot, value));
        Ok(())
    }
}

/// Counts phase 2b votes per instance and ballot.
#[derive(Clone, Debug)]
pub(crate) struct Tally<V> {
    majority: usize,
    votes: BTreeMap<(u8, Ballot), (V, BTreeSet<Pid>)>,
    pub chosen: BTreeMap<u8, V>,
}

impl<V: Clone + Eq> Tally<V> {
    pub fn new(acceptors: usize) -> Self {
        Tally { majority: acceptors / 2 + 1, votes: BTreeMap::new(), chosen: BTreeMap::new() }
    }

    /// Records that `acceptor` accepted `value` in `(inst, ballot)`; returns
    /// true when this makes the instance chosen.
    pub fn record(&mut self, acceptor: Pid, inst: u8, ballot: Ballot, value: V) -> bool {
        if self.chosen.contains_key(&inst) {
            return false;
        }
        let entry = self.votes.entry((inst, ballot)).or_insert_with(|| (value.clone(), BTreeSet::new()));
        entry.1.insert(acceptor);
        if entry.1.len() >= self.majority {
            self.chosen.insert(inst, entry.0.clone());
            return true;
        }
        false
    }
}

/// Values chosen anywhere in a run, judged from every acceptor's log.
pub(crate) fn chosen_values<V: Clone + Ord>(logs: &[&[(u8, Ballot, V)]], inst: u8) -> BTreeSet<V> {
    let majority = logs.len() / 2 + 1;
    let mut count: BTreeMap<(Ballot, V), usize> = BTreeMap::new();
    for log in logs {
        let mine: BTreeSet<(Ballot, V)> = log.iter().filter(|e| e.0 == inst).map(|e| (e.1, e.2.clone())).collect();
        for k in mine {
            *count.entry(k).or_default() += 1;
        }
    }
    count.into_iter().filter(|(_, c)| *c >= majority).map(|((_, v), _)| v).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum PaxosMsg<V> {
    P1a { ballot: Ballot, instances: Vec<u8> },
    P1b { ballot: Ballot, accepted: Vec<(u8, Option<(Ballot, V)>)> },
    P2a { ballot: Ballot, inst: u8, value: V },
    P2b { ballot: Ballot, inst: u8, value: V },
    Nack { promised: Ballot },
}

impl<V: Clone + Debug> Message for PaxosMsg<V> {
    fn msg_type(&self) -> &'static str {
        match self {
            PaxosMsg::P1a { .. } => "PHASE1A",
            PaxosMsg::P1b { .. } => "PHASE1B",
            PaxosMsg::P2a { .. } => "PHASE2A",
            PaxosMsg::P2b { .. } => "PHASE2B",
            PaxosMsg::Nack { .. } => "NACK",
        }
    }
}

/// A leader `tm{leader}` proposing `value`, starting at `at_tick`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct Proposal {
    pub leader: u8,
    pub value: u64,
    pub at_tick: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaxosOutcome {
    /// The value chosen by a majority of acceptors, if any.
    pub chosen: Option<u64>,
    /// Every distinct value that was ever chosen; safety demands at most one.
    pub all_chosen: BTreeSet<u64>,
    /// What each leader learned.
    pub learned: BTreeMap<Pid, u64>,
    /// Highest ballot any leader used.
    pub max_ballot: Ballot,
    pub trace: Vec<TraceEvent>,
    pub trace_hash: u64,
}

impl PaxosOutcome {
    pub fn safe(&self) -> bool {
        self.all_chosen.len() <= 1 && self.learned.values().all(|v| Some(*v) == self.chosen)
    }
}

const T_START: u32 = 1;
const T_RETRY: u32 = 2;
const MAX_ROUNDS: u32 = 12;

#[derive(Clone, Debug)]
struct Leader {
    id: u8,
    value: u64,
    at_tick: u64,
    acceptors: Vec<Pid>,
    ballot: Ballot,
    highest_seen: Ballot,
    rounds: u32,
    promises: BTreeMap<Pid, Option<(Ballot, u64)>>,
    proposing: Option<u64>,
    accepts: BTreeSet<Pid>,
    learned: Option<u64>,
}

impl Leader {
    fn majority(&self) -> usize {
        self.acceptors.len() / 2 + 1
    }

    fn start_ballot(&mut self, out: &mut Out<PaxosMsg<u64>>) {
        if self.learned.is_some() || self.rounds >= MAX_ROUNDS {
            return;
        }
        self.rounds += 1;
        self.promises.clear();
        self.accepts.clear();
        self.proposing = None;
        if self.id == 0 && self.rounds == 1 {
            self.ballot = Ballot::ZERO;
            self.propose(self.value, out);
        } else {
            self.ballot = Ballot { round: self.highest_seen.round.max(self.ballot.round) + 1, leader: self.id };
            out.broadcast(self.acceptors.iter().copied(), PaxosMsg::P1a { ballot: self.ballot, instances: alloc::vec![0] });
        }
        self.highest_seen = self.highest_seen.max(self.ballot);
        // staggered so dueling leaders eventually stop preempting each other
        out.timer(TIMEOUT + 4 * u64::from(self.id), T_RETRY);
    }

    fn propose(&mut self, v: u64, out: &mut Out<PaxosMsg<u64>>) {
        self.proposing = Some(v);
        out.broadcast(self.acceptors.iter().copied(), PaxosMsg::P2a { ballot: self.ballot, inst: 0, value: v });
    }
}

#[derive(Clone, Debug)]
enum PaxosNode {
    Leader(Leader),
    Acceptor(Pid, AcceptorCore<u64>),
}

impl Node for PaxosNode {
    type Msg = PaxosMsg<u64>;

    fn pid(&self) -> Pid {
        match self {
            PaxosNode::Leader(l) => Pid::Tm(l.id),
            PaxosNode::Acceptor(p, _) => *p,
        }
    }

    fn on_start(&mut self, out: &mut Out<Self::Msg>) {
        if let PaxosNode::Leader(l) = self {
            out.timer(l.at_tick, T_START);
        }
    }

    fn on_message(&mut self, from: Pid, msg: Self::Msg, out: &mut Out<Self::Msg>) {
        match self {
            PaxosNode::Acceptor(_, core) => match msg {
                PaxosMsg::P1a { ballot, instances } => match core.prepare(ballot, &instances) {
                    Ok(accepted) => out.send(from, PaxosMsg::P1b { ballot, accepted }),
                    Err(promised) => out.send(from, PaxosMsg::Nack { promised }),
                },
                PaxosMsg::P2a { ballot, inst, value } => match core.accept(inst, ballot, value) {
                    Ok(()) => out.send(from, PaxosMsg::P2b { ballot, inst, value }),
                    Err(promised) => out.send(from, PaxosMsg::Nack { promised }),
                },
                _ => {}
            },
            PaxosNode::Leader(l) => match msg {
                PaxosMsg::P1b { ballot, accepted } if ballot == l.ballot && l.proposing.is_none() => {
                    l.promises.insert(from, accepted.into_iter().find(|a| a.0 == 0).and_then(|a| a.1));
                    if l.promises.len() >= l.majority() {
                        let v = l.promises.values().flatten().max_by_key(|(b, _)| *b).map_or(l.value, |(_, v)| *v);
                        l.propose(v, out);
                    }
                }
                PaxosMsg::P2b { ballot, value, .. } if ballot == l.ballot && l.learned.is_none() => {
                    l.accepts.insert(from);
                    if l.accepts.len() >= l.majority() {
                        l.learned = Some(value);
                    }
                }
                PaxosMsg::Nack { promised } => l.highest_seen = l.highest_seen.max(promised),
                _ => {}
            },
        }
    }

    fn on_timer(&mut self, _id: u32, out: &mut Out<Self::Msg>) {
        if let PaxosNode::Leader(l) = self {
            l.start_ballot(out);
        }
    }

    fn on_crash(&mut self) {
        if let PaxosNode::Leader(l) = self {
            l.promises.clear();
            l.accepts.clear();
            l.proposing = None;
        }
    }

    fn on_recover(&mut self, out: &mut Out<Self::Msg>) {
        if let PaxosNode::Leader(l) = self {
            l.start_ballot(out);
        }
    }
}

/// Single-decree Paxos with `acceptors` acceptors and one leader per proposal.
pub fn run_paxos(acceptors: usize, proposals: &[Proposal], sim: SimConfig) -> Result<PaxosOutcome, ConfigError> {
    if acceptors.is_multiple_of(2) {
        return Err(ConfigError::EvenAcceptors(acceptors));
    }
    if proposals.is_empty() {
        return Err(ConfigError::NoProposals);
    }
    let accs: Vec<Pid> = (0..acceptors as u8).map(Pid::Acceptor).collect();
    let mut nodes: Vec<PaxosNode> = accs.iter().map(|&a| PaxosNode::Acceptor(a, AcceptorCore::default())).collect();
    nodes.extend(proposals.iter().map(|p| {
        PaxosNode::Leader(Leader {
            id: p.leader,
            value: p.value,
            at_tick: p.at_tick,
            acceptors: accs.clone(),
            ballot: Ballot::ZERO,
            highest_seen: Ballot::ZERO,
            rounds: 0,
            promises: BTreeMap::new(),
            proposing: None,
            accepts: BTreeSet::new(),
            learned: None,
        })
    }));
    let r = SimNet::new(nodes, sim).run();
    let trace_hash = r.trace_hash();
    let mut logs = Vec::new();
    let mut learned = BTreeMap::new();
    let mut max_ballot = Ballot::ZERO;
    for (pid, n) in &r.nodes {
        match n {
            PaxosNode::Acceptor(_, core) => logs.push(core.log.as_slice()),
            PaxosNode::Leader(l) => {
                max_ballot = max_ballot.max(l.ballot);
                if let Some(v) = l.learned {
                    learned.insert(*pid, v);
                }
            }
        }
    }
    let all_chosen = chosen_values(&logs, 0);
    Ok(PaxosOutcome { chosen: all_chosen.iter().next().copied(), all_chosen, learned, max_ballot, trace: r.trace, trace_hash })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::FaultSchedule;
    use alloc::vec;

    fn one(leader: u8, value: u64, at_tick: u64) -> Proposal {
        Proposal { leader, value, at_tick }
    }

    #[test]
    fn single_proposal_chosen_in_ballot_zero() {
        let o = run_paxos(3, &[one(0, 7, 0)], SimConfig::default()).unwrap();
        assert_eq!(o.chosen, Some(7));
        assert_eq!(o.max_ballot, Ballot::ZERO);
        assert!(o.safe());
    }

    #[test]
    fn no_majority_no_choice() {
        let faults = FaultSchedule::default().crash(Pid::Acceptor(0), 0).crash(Pid::Acceptor(1), 0);
        let o = run_paxos(3, &[one(0, 7, 0)], SimConfig { faults: faults.clone(), ..Default::default() }).unwrap();
        assert_eq!(o.chosen, None);
        let healed = faults.recover(Pid::Acceptor(1), 25);
        let o = run_paxos(3, &[one(0, 7, 0)], SimConfig { faults: healed, ..Default::default() }).unwrap();
        assert_eq!(o.chosen, Some(7));
    }

    #[test]
    fn later_leader_adopts_chosen_value() {
        let o = run_paxos(3, &[one(0, 7, 0), one(1, 9, 8)], SimConfig::default()).unwrap();
        assert_eq!(o.chosen, Some(7));
        assert_eq!(o.learned.get(&Pid::Tm(1)), Some(&7));
    }

    #[test]
    fn dueling_leaders_stay_safe() {
        for seed in 0..200 {
            let sim = SimConfig { seed, jitter: 3, ..Default::default() };
            let o = run_paxos(3, &[one(1, 10, 0), one(2, 20, 1), one(3, 30, 2)], sim).unwrap();
            assert!(o.safe(), "seed {seed}: {:?}", o.all_chosen);
            assert!(o.chosen.is_some(), "seed {seed} chose nothing");
        }
    }

    #[test]
    fn acceptor_never_accepts_below_promise() {
        let mut a = AcceptorCore::default();
        let hi = Ballot { round: 2, leader: 1 };
        assert!(a.prepare(hi, &[0]).is_ok());
        assert_eq!(a.accept(0, Ballot { round: 1, leader: 5 }, 3), Err(hi));
        assert_eq!(a.prepare(Ballot { round: 1, leader: 0 }, &[0]), Err(hi));
        assert!(a.accept(0, hi, 4).is_ok());
        assert_eq!(a.log, vec![(0, hi, 4)]);
    }
}
