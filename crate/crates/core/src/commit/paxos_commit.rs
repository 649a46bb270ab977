//! Paxos Commit: one Paxos instance per resource manager decides whether
//! that manager prepared.
//!
//! Each resource manager proposes its own vote in ballot zero directly to the
//! acceptors. In the `Classic` variant each acceptor sends the leader a single
//! aggregated message once it has accepted every instance, and the leader
//! broadcasts the outcome. In `AcceptorBroadcast` the acceptors send that
//! message to the resource managers too, which decide on their own one delay
//! sooner. A leader that times out runs a higher ballot in every unchosen
//! instance and proposes `Aborted` where no vote was accepted.
//!
//! With `f = 0` the single acceptor lives inside `tm0`; its messages to the
//! leader are local and the protocol degenerates to two-phase commit.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use super::paxos::{AcceptorCore, Ballot, Tally};
use super::{rm_index, rm_pids, ConfigError, Outcome, Vote, TIMEOUT, T_POLL, T_VOTES};
use crate::sim::{Decision, Message, Node, Out, Pid, SimConfig, SimNet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Variant {
    #[default]
    Classic,
    AcceptorBroadcast,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Msg {
    Begin,
    Prepare,
    P1a { ballot: Ballot, instances: Vec<u8> },
    P1b { ballot: Ballot, accepted: Vec<(u8, Option<(Ballot, Vote)>)> },
    P2a { ballot: Ballot, inst: u8, vote: Vote },
    P2b { ballot: Ballot, inst: u8, vote: Vote },
    /// One acceptor's ballot-zero acceptances for every instance.
    P2bAll { entries: Vec<(u8, Vote)> },
    Nack { promised: Ballot },
    Decided(Decision),
    Query,
}

impl Message for Msg {
    fn msg_type(&self) -> &'static str {
        match self {
            Msg::Begin => "BEGIN-COMMIT",
            Msg::Prepare => "PREPARE",
            Msg::P1a { .. } => "PHASE1A",
            Msg::P1b { .. } => "PHASE1B",
            Msg::P2a { .. } => "PHASE2A",
            Msg::P2b { .. } => "PHASE2B",
            Msg::P2bAll { .. } => "PREPARED-ALL",
            Msg::Nack { .. } => "NACK",
            Msg::Decided(Decision::Commit) => "COMMIT",
            Msg::Decided(Decision::Abort) => "ABORT",
            Msg::Query => "STATUS-QUERY",
        }
    }
}

fn outcome_of(chosen: &BTreeMap<u8, Vote>, n: usize) -> Option<Decision> {
    if chosen.values().any(|v| *v == Vote::Aborted) {
        Some(Decision::Abort)
    } else if chosen.len() == n {
        Some(Decision::Commit)
    } else {
        None
    }
}

#[derive(Clone, Debug)]
struct Acceptor {
    me: Pid,
    n: usize,
    variant: Variant,
    rms: Vec<Pid>,
    core: AcceptorCore<Vote>,
    sent_all: bool,
}

impl Acceptor {
    fn on_message(&mut self, from: Pid, msg: Msg, out: &mut Out<Msg>) {
        match msg {
            Msg::P1a { ballot, instances } => match self.core.prepare(ballot, &instances) {
                Ok(accepted) => out.send(from, Msg::P1b { ballot, accepted }),
                Err(promised) => out.send(from, Msg::Nack { promised }),
            },
            Msg::P2a { ballot, inst, vote } => {
                if let Err(promised) = self.core.accept(inst, ballot, vote) {
                    if matches!(from, Pid::Tm(_)) {
                        out.send(from, Msg::Nack { promised });
                    }
                    return;
                }
                if ballot == Ballot::ZERO {
                    self.maybe_send_all(out);
                } else {
                    out.send(from, Msg::P2b { ballot, inst, vote });
                    if self.variant == Variant::AcceptorBroadcast {
                        out.broadcast(self.rms.iter().copied(), Msg::P2b { ballot, inst, vote });
                    }
                }
            }
            _ => {}
        }
    }

    fn maybe_send_all(&mut self, out: &mut Out<Msg>) {
        let zero: Vec<(u8, Vote)> =
            self.core.accepted.iter().filter(|(_, (b, _))| *b == Ballot::ZERO).map(|(i, (_, v))| (*i, *v)).collect();
        if self.sent_all || zero.len() < self.n {
            return;
        }
        self.sent_all = true;
        out.send(Pid::Tm(0), Msg::P2bAll { entries: zero.clone() });
        if self.variant == Variant::AcceptorBroadcast {
            out.broadcast(self.rms.iter().copied(), Msg::P2bAll { entries: zero });
        }
    }
}

#[derive(Clone, Debug)]
struct Leader {
    id: u8,
    rms: Vec<Pid>,
    acceptors: Vec<Pid>,
    /// The `f = 0` acceptor, stable and co-located.
    local: Option<AcceptorCore<Vote>>,
    /// Stable: this process has been made leader.
    leads: bool,
    decision: Option<Decision>,
    round: u32,
    ballot: Ballot,
    tally: Tally<Vote>,
    promises: BTreeMap<Pid, Vec<(u8, Option<(Ballot, Vote)>)>>,
    phase2: bool,
}

impl Leader {
    fn pid(&self) -> Pid {
        Pid::Tm(self.id)
    }

    fn reset(&mut self) {
        self.tally = Tally::new(self.acceptors.len());
        self.promises.clear();
        self.phase2 = false;
    }

    fn record(&mut self, acc: Pid, inst: u8, ballot: Ballot, vote: Vote, out: &mut Out<Msg>) {
        if self.decision.is_none() && self.tally.record(acc, inst, ballot, vote) {
            if let Some(d) = outcome_of(&self.tally.chosen, self.rms.len()) {
                self.decision = Some(d);
                out.broadcast(self.rms.iter().copied(), Msg::Decided(d));
            }
        }
    }

    /// Higher ballot in every instance not yet chosen.
    fn recover_instances(&mut self, out: &mut Out<Msg>) {
        if self.decision.is_some() {
            return;
        }
        self.round += 1;
        self.ballot = Ballot { round: self.round, leader: self.id };
        self.promises.clear();
        self.phase2 = false;
        let instances: Vec<u8> = (0..self.rms.len() as u8).filter(|i| !self.tally.chosen.contains_key(i)).collect();
        out.timer(TIMEOUT, T_VOTES);
        if let Some(core) = self.local.as_mut() {
            if let Ok(accepted) = core.prepare(self.ballot, &instances) {
                let me = self.pid();
                self.on_p1b(me, self.ballot, accepted, out);
            }
            return;
        }
        out.broadcast(self.acceptors.iter().copied(), Msg::P1a { ballot: self.ballot, instances });
    }

    fn on_p1b(&mut self, from: Pid, ballot: Ballot, accepted: Vec<(u8, Option<(Ballot, Vote)>)>, out: &mut Out<Msg>) {
        if ballot != self.ballot || self.phase2 || self.decision.is_some() {
            return;
        }
        self.promises.insert(from, accepted);
        if self.promises.len() < self.acceptors.len() / 2 + 1 {
            return;
        }
        self.phase2 = true;
        let mut pick: BTreeMap<u8, Option<(Ballot, Vote)>> = BTreeMap::new();
        for (inst, acc) in self.promises.values().flatten() {
            let slot = pick.entry(*inst).or_default();
            if acc.is_some_and(|a| slot.is_none_or(|s| a.0 > s.0)) {
                *slot = *acc;
            }
        }
        for (inst, acc) in pick {
            let vote = acc.map_or(Vote::Aborted, |(_, v)| v);
            let ballot = self.ballot;
            if let Some(core) = self.local.as_mut() {
                if core.accept(inst, ballot, vote).is_ok() {
                    let me = self.pid();
                    self.record(me, inst, ballot, vote, out);
                }
            } else {
                out.broadcast(self.acceptors.iter().copied(), Msg::P2a { ballot, inst, vote });
            }
        }
    }

    fn on_message(&mut self, from: Pid, msg: Msg, out: &mut Out<Msg>) {
        match msg {
            Msg::Begin if self.decision.is_none() => {
                out.broadcast(self.rms.iter().copied(), Msg::Prepare);
                out.timer(TIMEOUT, T_VOTES);
            }
            Msg::P2a { ballot, inst, vote } => {
                // only reaches a leader when it hosts the acceptor
                let me = self.pid();
                if let Some(core) = self.local.as_mut() {
                    if core.accept(inst, ballot, vote).is_ok() {
                        self.record(me, inst, ballot, vote, out);
                    }
                }
            }
            Msg::P2bAll { entries } => {
                for (inst, vote) in entries {
                    self.record(from, inst, Ballot::ZERO, vote, out);
                }
            }
            Msg::P2b { ballot, inst, vote } => self.record(from, inst, ballot, vote, out),
            Msg::P1b { ballot, accepted } => self.on_p1b(from, ballot, accepted, out),
            Msg::Nack { promised } => self.round = self.round.max(promised.round),
            Msg::Query => {
                if let Some(d) = self.decision {
                    out.send(from, Msg::Decided(d));
                }
            }
            _ => {}
        }
    }
}

#[derive(Clone, Debug)]
struct Rm {
    me: Pid,
    vote: Vote,
    acceptors: Vec<Pid>,
    tms: Vec<Pid>,
    n: usize,
    prepared: bool,
    decision: Option<Decision>,
    tally: Tally<Vote>,
}

impl Rm {
    fn propose(&self, vote: Vote, out: &mut Out<Msg>) {
        let inst = rm_index(self.me);
        out.broadcast(self.acceptors.iter().copied(), Msg::P2a { ballot: Ballot::ZERO, inst, vote });
    }

    fn poll(&self, out: &mut Out<Msg>) {
        out.broadcast(self.tms.iter().copied(), Msg::Query);
        out.timer(TIMEOUT, T_POLL);
    }

    fn record(&mut self, acc: Pid, inst: u8, ballot: Ballot, vote: Vote) {
        if self.decision.is_none() && self.tally.record(acc, inst, ballot, vote) {
            self.decision = outcome_of(&self.tally.chosen, self.n);
        }
    }

    fn on_message(&mut self, from: Pid, msg: Msg, out: &mut Out<Msg>) {
        match msg {
            Msg::Prepare if self.decision.is_none() && !self.prepared => match self.vote {
                Vote::Prepared => {
                    self.prepared = true;
                    self.propose(Vote::Prepared, out);
                    out.timer(TIMEOUT, T_POLL);
                }
                Vote::Aborted => {
                    self.decision = Some(Decision::Abort);
                    self.propose(Vote::Aborted, out);
                }
            },
            Msg::Decided(d) if self.decision.is_none() => self.decision = Some(d),
            Msg::P2bAll { entries } => {
                for (inst, vote) in entries {
                    self.record(from, inst, Ballot::ZERO, vote);
                }
            }
            Msg::P2b { ballot, inst, vote } => self.record(from, inst, ballot, vote),
            _ => {}
        }
    }
}

#[derive(Clone, Debug)]
enum PcNode {
    Client,
    Leader(Leader),
    Acceptor(Acceptor),
    Rm(Rm),
}

impl Node for PcNode {
    type Msg = Msg;

    fn pid(&self) -> Pid {
        match self {
            PcNode::Client => Pid::Client,
            PcNode::Leader(l) => l.pid(),
            PcNode::Acceptor(a) => a.me,
            PcNode::Rm(r) => r.me,
        }
    }

    fn on_start(&mut self, out: &mut Out<Msg>) {
        if let PcNode::Client = self {
            out.send(Pid::Tm(0), Msg::Begin);
        }
    }

    fn on_message(&mut self, from: Pid, msg: Msg, out: &mut Out<Msg>) {
        match self {
            PcNode::Client => {}
            PcNode::Leader(l) => l.on_message(from, msg, out),
            PcNode::Acceptor(a) => a.on_message(from, msg, out),
            PcNode::Rm(r) => r.on_message(from, msg, out),
        }
    }

    fn on_timer(&mut self, id: u32, out: &mut Out<Msg>) {
        match self {
            PcNode::Leader(l) if id == T_VOTES && l.leads => l.recover_instances(out),
            PcNode::Rm(r) if r.decision.is_none() => r.poll(out),
            _ => {}
        }
    }

    fn on_crash(&mut self) {
        match self {
            PcNode::Leader(l) => l.reset(),
            PcNode::Rm(r) => r.tally = Tally::new(r.acceptors.len()),
            PcNode::Acceptor(a) => a.sent_all = false,
            PcNode::Client => {}
        }
    }

    fn on_recover(&mut self, out: &mut Out<Msg>) {
        match self {
            PcNode::Leader(l) => match l.decision {
                Some(d) => out.broadcast(l.rms.iter().copied(), Msg::Decided(d)),
                None if l.leads => l.recover_instances(out),
                None => {}
            },
            PcNode::Rm(r) if r.decision.is_none() => {
                if r.prepared {
                    r.poll(out);
                } else {
                    r.decision = Some(Decision::Abort);
                    r.propose(Vote::Aborted, out);
                }
            }
            PcNode::Acceptor(a) => a.maybe_send_all(out),
            _ => {}
        }
    }

    fn on_lead(&mut self, out: &mut Out<Msg>) {
        if let PcNode::Leader(l) = self {
            l.leads = true;
            match l.decision {
                Some(d) => out.broadcast(l.rms.iter().copied(), Msg::Decided(d)),
                None => l.recover_instances(out),
            }
        }
    }

    fn decision(&self) -> Option<Decision> {
        match self {
            PcNode::Leader(l) => l.decision,
            PcNode::Rm(r) => r.decision,
            _ => None,
        }
    }
}

/// Paxos Commit with `acceptors` acceptors tolerating `f` faults.
///
/// `tm0` is the initial leader; with `f > 0` a standby leader `tm1` exists
/// and takes over when the fault schedule names it.
pub fn run_paxos_commit(votes: &[Vote], f: usize, acceptors: usize, variant: Variant, sim: SimConfig) -> Result<Outcome, ConfigError> {
    if acceptors != 2 * f + 1 {
        return Err(ConfigError::AcceptorCount { acceptors, f });
    }
    if votes.is_empty() {
        return Err(ConfigError::NoResourceManagers);
    }
    let n = votes.len();
    let rms = rm_pids(n);
    let (accs, tms): (Vec<Pid>, Vec<Pid>) = if f == 0 {
        (alloc::vec![Pid::Tm(0)], alloc::vec![Pid::Tm(0)])
    } else {
        ((0..acceptors as u8).map(Pid::Acceptor).collect(), alloc::vec![Pid::Tm(0), Pid::Tm(1)])
    };
    let mut nodes = alloc::vec![PcNode::Client];
    for &tm in &tms {
        let id = match tm {
            Pid::Tm(i) => i,
            _ => unreachable!(),
        };
        nodes.push(PcNode::Leader(Leader {
            id,
            rms: rms.clone(),
            acceptors: accs.clone(),
            local: (f == 0).then(AcceptorCore::default),
            leads: id == 0,
            decision: None,
            round: 0,
            ballot: Ballot::ZERO,
            tally: Tally::new(accs.len()),
            promises: BTreeMap::new(),
            phase2: false,
        }));
    }
    if f > 0 {
        nodes.extend(accs.iter().map(|&me| {
            PcNode::Acceptor(Acceptor { me, n, variant, rms: rms.clone(), core: AcceptorCore::default(), sent_all: false })
        }));
    }
    nodes.extend(rms.iter().zip(votes).map(|(&me, &vote)| {
        PcNode::Rm(Rm {
            me,
            vote,
            acceptors: accs.clone(),
            tms: tms.clone(),
            n,
            prepared: false,
            decision: None,
            tally: Tally::new(accs.len()),
        })
    }));
    let r = SimNet::new(nodes, sim).run();
    Ok(Outcome::from_sim(r, votes, &tms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commit::run_2pc;
    use crate::sim::FaultSchedule;

    fn with(faults: FaultSchedule) -> SimConfig {
        SimConfig { faults, ..Default::default() }
    }

    #[test]
    fn classic_failure_free() {
        let o = run_paxos_commit(&[Vote::Prepared; 2], 1, 3, Variant::Classic, SimConfig::default()).unwrap();
        assert_eq!(o.rm_decision(), Some(Decision::Commit));
        assert_eq!(o.delays, Some(4));
        assert_eq!(o.delays_with_initiation, Some(5));
        // PREPARE, 2 x 3 phase 2a, 3 aggregated 2b, COMMIT
        assert_eq!(o.messages, 2 + 6 + 3 + 2);
    }

    #[test]
    fn broadcast_saves_a_delay_at_a_message_cost() {
        let classic = run_paxos_commit(&[Vote::Prepared; 3], 1, 3, Variant::Classic, SimConfig::default()).unwrap();
        let bcast = run_paxos_commit(&[Vote::Prepared; 3], 1, 3, Variant::AcceptorBroadcast, SimConfig::default()).unwrap();
        assert_eq!(bcast.delays, Some(3));
        assert_eq!(bcast.rm_decision(), Some(Decision::Commit));
        assert!(bcast.messages > classic.messages);
    }

    #[test]
    fn f0_matches_2pc() {
        for n in 1..=4 {
            let votes = alloc::vec![Vote::Prepared; n];
            let pc = run_paxos_commit(&votes, 0, 1, Variant::Classic, SimConfig::default()).unwrap();
            let tpc = run_2pc(&votes, SimConfig::default()).unwrap();
            assert_eq!((pc.delays, pc.messages), (tpc.delays, tpc.messages));
            let crash = || with(FaultSchedule::default().crash_on_send(Pid::Tm(0), "COMMIT"));
            let pc = run_paxos_commit(&votes, 0, 1, Variant::Classic, crash()).unwrap();
            let tpc = run_2pc(&votes, crash()).unwrap();
            assert_eq!(pc.blocked, tpc.blocked);
            assert_eq!(pc.blocked.len(), n);
        }
    }

    #[test]
    fn any_single_acceptor_crash_still_commits() {
        for acc in 0..3 {
            for tick in 0..6 {
                let faults = FaultSchedule::default().crash(Pid::Acceptor(acc), tick);
                let o = run_paxos_commit(&[Vote::Prepared; 2], 1, 3, Variant::Classic, with(faults)).unwrap();
                assert_eq!(o.rm_decision(), Some(Decision::Commit), "acc{acc} at {tick}");
                assert!(o.blocked.is_empty() && o.agreement());
            }
        }
    }

    #[test]
    fn standby_leader_finishes_after_leader_crash() {
        let faults = FaultSchedule::default().crash_on_send(Pid::Tm(0), "COMMIT").lead(Pid::Tm(1), 20);
        let o = run_paxos_commit(&[Vote::Prepared; 2], 1, 3, Variant::Classic, with(faults)).unwrap();
        assert_eq!(o.rm_decision(), Some(Decision::Commit));
        assert_eq!(o.decisions[&Pid::Tm(1)], Some(Decision::Commit));
        assert!(o.agreement());
    }

    #[test]
    fn missing_vote_is_aborted_by_leader() {
        let faults = FaultSchedule::default().crash(Pid::Rm(1), 0);
        let o = run_paxos_commit(&[Vote::Prepared; 2], 1, 3, Variant::Classic, with(faults)).unwrap();
        assert_eq!(o.decisions[&Pid::Rm(0)], Some(Decision::Abort));
        assert!(o.agreement() && o.validity());
    }

    #[test]
    fn acceptor_count_must_be_2f_plus_1() {
        assert_eq!(
            run_paxos_commit(&[Vote::Prepared], 1, 4, Variant::Classic, SimConfig::default()).unwrap_err(),
            ConfigError::AcceptorCount { acceptors: 4, f: 1 }
        );
    }
}
