//! Two-phase commit with a single transaction manager.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use super::{rm_pids, ConfigError, Outcome, Vote, TIMEOUT, T_POLL, T_VOTES};
use crate::sim::{Decision, Message, Node, Out, Pid, SimConfig, SimNet};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub(crate) enum Msg {
    Begin,
    Prepare,
    Prepared,
    Aborted,
    Decided(Decision),
    Query,
    /// Primary to backups (backup-TM 3PC only).
    Replicate(Decision),
    Ack(Decision),
}

impl Message for Msg {
    fn msg_type(&self) -> &'static str {
        match self {
            Msg::Begin => "BEGIN-COMMIT",
            Msg::Prepare => "PREPARE",
            Msg::Prepared => "PREPARED",
            Msg::Aborted => "ABORTED",
            Msg::Decided(Decision::Commit) => "COMMIT",
            Msg::Decided(Decision::Abort) => "ABORT",
            Msg::Query => "STATUS-QUERY",
            Msg::Replicate(_) => "DECISION",
            Msg::Ack(_) => "DECISION-ACK",
        }
    }
}

/// Resource manager shared by 2PC and backup-TM 3PC: it only ever talks to
/// transaction managers.
#[derive(Clone, Debug)]
pub(crate) struct Rm {
    pub me: Pid,
    pub tms: Vec<Pid>,
    pub vote: Vote,
    /// Stable: updates persisted and PREPARED about to be sent.
    pub prepared: bool,
    pub decision: Option<Decision>,
}

impl Rm {
    pub fn new(me: Pid, tms: Vec<Pid>, vote: Vote) -> Self {
        Rm { me, tms, vote, prepared: false, decision: None }
    }

    fn poll(&self, out: &mut Out<Msg>) {
        out.broadcast(self.tms.iter().copied(), Msg::Query);
        out.timer(TIMEOUT, T_POLL);
    }

    pub fn on_message(&mut self, from: Pid, msg: Msg, out: &mut Out<Msg>) {
        match msg {
            Msg::Prepare => {
                if self.decision == Some(Decision::Abort) {
                    out.send(from, Msg::Aborted);
                } else if self.decision.is_none() {
                    match self.vote {
                        Vote::Prepared => {
                            self.prepared = true;
                            out.send(from, Msg::Prepared);
                            out.timer(TIMEOUT, T_POLL);
                        }
                        Vote::Aborted => {
                            self.decision = Some(Decision::Abort);
                            out.send(from, Msg::Aborted);
                        }
                    }
                }
            }
            Msg::Decided(d)
                if self.decision.is_none() => {
                    self.decision = Some(d);
                }
            _ => {}
        }
    }

    pub fn on_timer(&mut self, out: &mut Out<Msg>) {
        if self.decision.is_none() && self.prepared {
            self.poll(out);
        }
    }

    pub fn on_recover(&mut self, out: &mut Out<Msg>) {
        if self.decision.is_none() {
            if self.prepared {
                self.poll(out);
            } else {
                // never promised anything, so it may abort on its own
                self.decision = Some(Decision::Abort);
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Tm {
    rms: Vec<Pid>,
    started: bool,
    prepared: BTreeSet<Pid>,
    decision: Option<Decision>,
}

impl Tm {
    fn decide(&mut self, d: Decision, out: &mut Out<Msg>) {
        self.decision = Some(d);
        out.broadcast(self.rms.iter().copied(), Msg::Decided(d));
    }
}

#[derive(Clone, Debug)]
enum TpcNode {
    Client,
    Tm(Tm),
    Rm(Rm),
}

impl Node for TpcNode {
    type Msg = Msg;

    fn pid(&self) -> Pid {
        match self {
            TpcNode::Client => Pid::Client,
            TpcNode::Tm(_) => Pid::Tm(0),
            TpcNode::Rm(rm) => rm.me,
        }
    }

    fn on_start(&mut self, out: &mut Out<Msg>) {
        if let TpcNode::Client = self {
            out.send(Pid::Tm(0), Msg::Begin);
        }
    }

    fn on_message(&mut self, from: Pid, msg: Msg, out: &mut Out<Msg>) {
        match self {
            TpcNode::Client => {}
            TpcNode::Rm(rm) => rm.on_message(from, msg, out),
            TpcNode::Tm(tm) => match msg {
                Msg::Begin if !tm.started && tm.decision.is_none() => {
                    tm.started = true;
                    out.broadcast(tm.rms.iter().copied(), Msg::Prepare);
                    out.timer(TIMEOUT, T_VOTES);
                }
                Msg::Prepared if tm.started && tm.decision.is_none() => {
                    tm.prepared.insert(from);
                    if tm.prepared.len() == tm.rms.len() {
                        tm.decide(Decision::Commit, out);
                    }
                }
                Msg::Aborted if tm.decision.is_none() => tm.decide(Decision::Abort, out),
                Msg::Query => {
                    if let Some(d) = tm.decision {
                        out.send(from, Msg::Decided(d));
                    }
                }
                _ => {}
            },
        }
    }

    fn on_timer(&mut self, id: u32, out: &mut Out<Msg>) {
        match self {
            TpcNode::Tm(tm) if id == T_VOTES && tm.decision.is_none() => tm.decide(Decision::Abort, out),
            TpcNode::Rm(rm) => rm.on_timer(out),
            _ => {}
        }
    }

    fn on_crash(&mut self) {
        if let TpcNode::Tm(tm) = self {
            tm.started = false;
            tm.prepared.clear();
        }
    }

    fn on_recover(&mut self, out: &mut Out<Msg>) {
        match self {
            TpcNode::Tm(tm) => match tm.decision {
                Some(d) => out.broadcast(tm.rms.iter().copied(), Msg::Decided(d)),
                // votes were volatile: presume abort
                None => tm.decide(Decision::Abort, out),
            },
            TpcNode::Rm(rm) => rm.on_recover(out),
            TpcNode::Client => {}
        }
    }

    fn decision(&self) -> Option<Decision> {
        match self {
            TpcNode::Client => None,
            TpcNode::Tm(tm) => tm.decision,
            TpcNode::Rm(rm) => rm.decision,
        }
    }
}

/// Two-phase commit among `votes.len()` resource managers.
pub fn run_2pc(votes: &[Vote], sim: SimConfig) -> Result<Outcome, ConfigError> {
    if votes.is_empty() {
        return Err(ConfigError::NoResourceManagers);
    }
    let rms = rm_pids(votes.len());
    let mut nodes = alloc::vec![TpcNode::Client, TpcNode::Tm(Tm { rms: rms.clone(), started: false, prepared: BTreeSet::new(), decision: None })];
    nodes.extend(rms.iter().zip(votes).map(|(&p, &v)| TpcNode::Rm(Rm::new(p, alloc::vec![Pid::Tm(0)], v))));
    let r = SimNet::new(nodes, sim).run();
    Ok(Outcome::from_sim(r, votes, &[Pid::Tm(0)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{FaultSchedule, MsgMatcher};
    use alloc::vec;

    fn with(faults: FaultSchedule) -> SimConfig {
        SimConfig { faults, ..Default::default() }
    }

    #[test]
    fn failure_free_commit() {
        for n in 1..=5 {
            let o = run_2pc(&vec![Vote::Prepared; n], SimConfig::default()).unwrap();
            assert!(o.decisions.values().all(|d| *d == Some(Decision::Commit)));
            assert_eq!(o.delays, Some(3));
            assert_eq!(o.delays_with_initiation, Some(4));
            assert_eq!(o.messages, 3 * n);
            assert!(o.blocked.is_empty());
        }
    }

    #[test]
    fn one_abort_vote_aborts_all() {
        let o = run_2pc(&[Vote::Prepared, Vote::Aborted, Vote::Prepared], SimConfig::default()).unwrap();
        assert!(o.decisions.values().all(|d| *d == Some(Decision::Abort)));
        assert!(o.validity() && o.agreement());
    }

    #[test]
    fn tm_crash_before_commit_blocks() {
        let o = run_2pc(&[Vote::Prepared; 3], with(FaultSchedule::default().crash_on_send(Pid::Tm(0), "COMMIT"))).unwrap();
        assert_eq!(o.decisions[&Pid::Tm(0)], Some(Decision::Commit));
        assert_eq!(o.blocked.len(), 3);
        assert!(o.agreement());
    }

    #[test]
    fn tm_recovery_unblocks() {
        let faults = FaultSchedule::default().crash_on_send(Pid::Tm(0), "COMMIT").recover(Pid::Tm(0), 40);
        let o = run_2pc(&[Vote::Prepared; 3], with(faults)).unwrap();
        assert_eq!(o.rm_decision(), Some(Decision::Commit));
        assert!(o.blocked.is_empty() && o.stable());
    }

    #[test]
    fn dropped_prepared_times_out_to_abort() {
        let mut faults = FaultSchedule::default();
        faults.drops.push(MsgMatcher { from: Some(Pid::Rm(1)), msg_type: Some("PREPARED".into()), ..Default::default() });
        let o = run_2pc(&[Vote::Prepared; 3], with(faults)).unwrap();
        assert_eq!(o.rm_decision(), Some(Decision::Abort));
        assert!(o.agreement());
    }

    #[test]
    fn empty_is_config_error() {
        assert_eq!(run_2pc(&[], SimConfig::default()).unwrap_err(), ConfigError::NoResourceManagers);
    }
}
