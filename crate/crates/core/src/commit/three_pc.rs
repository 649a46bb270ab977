//! Commit with a primary transaction manager and backups.
//!
//! The primary makes its decision durable at a quorum of backups before any
//! resource manager hears it, which costs two extra message delays. A backup
//! named leader by the schedule announces whatever it holds. With
//! `naive_takeover` a backup that holds nothing aborts on its own, which is
//! unsafe when the primary is merely slow.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use super::two_pc::{Msg, Rm};
use super::{rm_pids, ConfigError, Outcome, Vote, TIMEOUT, T_VOTES};
use crate::sim::{Decision, Node, Out, Pid, SimConfig, SimNet};

#[derive(Clone, Debug)]
struct Primary {
    rms: Vec<Pid>,
    backups: Vec<Pid>,
    started: bool,
    prepared: BTreeSet<Pid>,
    acks: BTreeSet<Pid>,
    announced: bool,
    decision: Option<Decision>,
}

impl Primary {
    fn quorum(&self) -> usize {
        self.backups.len() / 2 + 1
    }

    fn decide(&mut self, d: Decision, out: &mut Out<Msg>) {
        self.decision = Some(d);
        self.replicate(out);
    }

    fn replicate(&mut self, out: &mut Out<Msg>) {
        let d = self.decision.expect("decided");
        self.acks.clear();
        out.broadcast(self.backups.iter().copied(), Msg::Replicate(d));
    }
}

#[derive(Clone, Debug)]
struct Backup {
    me: Pid,
    rms: Vec<Pid>,
    naive: bool,
    leading: bool,
    decision: Option<Decision>,
}

impl Backup {
    fn announce(&self, out: &mut Out<Msg>) {
        if let Some(d) = self.decision {
            out.broadcast(self.rms.iter().copied(), Msg::Decided(d));
        }
    }
}

#[derive(Clone, Debug)]
enum Node3 {
    Client,
    Primary(Primary),
    Backup(Backup),
    Rm(Rm),
}

impl Node for Node3 {
    type Msg = Msg;

    fn pid(&self) -> Pid {
        match self {
            Node3::Client => Pid::Client,
            Node3::Primary(_) => Pid::Tm(0),
            Node3::Backup(b) => b.me,
            Node3::Rm(rm) => rm.me,
        }
    }

    fn on_start(&mut self, out: &mut Out<Msg>) {
        if let Node3::Client = self {
            out.send(Pid::Tm(0), Msg::Begin);
        }
    }

    fn on_message(&mut self, from: Pid, msg: Msg, out: &mut Out<Msg>) {
        match self {
            Node3::Client => {}
            Node3::Rm(rm) => rm.on_message(from, msg, out),
            Node3::Primary(p) => match msg {
                Msg::Begin if !p.started && p.decision.is_none() => {
                    p.started = true;
                    out.broadcast(p.rms.iter().copied(), Msg::Prepare);
                    out.timer(TIMEOUT, T_VOTES);
                }
                Msg::Prepared if p.started && p.decision.is_none() => {
                    p.prepared.insert(from);
                    if p.prepared.len() == p.rms.len() {
                        p.decide(Decision::Commit, out);
                    }
                }
                Msg::Aborted if p.decision.is_none() => p.decide(Decision::Abort, out),
                Msg::Ack(d) if Some(d) == p.decision && !p.announced => {
                    p.acks.insert(from);
                    if p.acks.len() >= p.quorum() {
                        p.announced = true;
                        out.broadcast(p.rms.iter().copied(), Msg::Decided(d));
                    }
                }
                Msg::Query if p.announced => out.send(from, Msg::Decided(p.decision.expect("announced"))),
                _ => {}
            },
            Node3::Backup(b) => match msg {
                Msg::Replicate(d) => {
                    if b.decision.is_none() {
                        b.decision = Some(d);
                        if b.leading {
                            b.announce(out);
                        }
                    }
                    out.send(from, Msg::Ack(b.decision.expect("set")));
                }
                Msg::Query if b.leading => {
                    if let Some(d) = b.decision {
                        out.send(from, Msg::Decided(d));
                    }
                }
                _ => {}
            },
        }
    }

    fn on_timer(&mut self, id: u32, out: &mut Out<Msg>) {
        match self {
            Node3::Primary(p) if id == T_VOTES && p.decision.is_none() => p.decide(Decision::Abort, out),
            Node3::Rm(rm) => rm.on_timer(out),
            _ => {}
        }
    }

    fn on_crash(&mut self) {
        match self {
            Node3::Primary(p) => {
                p.started = false;
                p.prepared.clear();
                p.acks.clear();
                p.announced = false;
            }
            Node3::Backup(b) => b.leading = false,
            _ => {}
        }
    }

    fn on_recover(&mut self, out: &mut Out<Msg>) {
        match self {
            Node3::Primary(p) => match p.decision {
                Some(_) => p.replicate(out),
                None => p.decide(Decision::Abort, out),
            },
            Node3::Rm(rm) => rm.on_recover(out),
            _ => {}
        }
    }

    fn on_lead(&mut self, out: &mut Out<Msg>) {
        if let Node3::Backup(b) = self {
            b.leading = true;
            if b.decision.is_none() && b.naive {
                b.decision = Some(Decision::Abort);
            }
            b.announce(out);
        }
    }

    fn decision(&self) -> Option<Decision> {
        match self {
            Node3::Client => None,
            Node3::Primary(p) => p.decision,
            Node3::Backup(b) => b.decision,
            Node3::Rm(rm) => rm.decision,
        }
    }
}

/// Backup-TM commit: `tm0` is primary, `tm1..=tm{backups}` are backups.
pub fn run_3pc_backup(votes: &[Vote], backups: usize, naive_takeover: bool, sim: SimConfig) -> Result<Outcome, ConfigError> {
    if votes.is_empty() {
        return Err(ConfigError::NoResourceManagers);
    }
    if backups == 0 {
        return Err(ConfigError::NoBackups);
    }
    let rms = rm_pids(votes.len());
    let tms: Vec<Pid> = (0..=backups as u8).map(Pid::Tm).collect();
    let mut nodes = alloc::vec![
        Node3::Client,
        Node3::Primary(Primary {
            rms: rms.clone(),
            backups: tms[1..].to_vec(),
            started: false,
            prepared: BTreeSet::new(),
            acks: BTreeSet::new(),
            announced: false,
            decision: None,
        }),
    ];
    nodes.extend(tms[1..].iter().map(|&me| {
        Node3::Backup(Backup { me, rms: rms.clone(), naive: naive_takeover, leading: false, decision: None })
    }));
    nodes.extend(rms.iter().zip(votes).map(|(&p, &v)| Node3::Rm(Rm::new(p, tms.clone(), v))));
    let r = SimNet::new(nodes, sim).run();
    Ok(Outcome::from_sim(r, votes, &tms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{FaultSchedule, MsgMatcher};

    fn with(faults: FaultSchedule) -> SimConfig {
        SimConfig { faults, ..Default::default() }
    }

    #[test]
    fn failure_free_adds_two_delays() {
        for backups in 1..=3 {
            let o = run_3pc_backup(&[Vote::Prepared; 3], backups, false, SimConfig::default()).unwrap();
            assert_eq!(o.rm_decision(), Some(Decision::Commit));
            assert_eq!(o.delays, Some(5));
            assert!(o.agreement());
        }
    }

    #[test]
    fn backup_completes_after_primary_crash() {
        let faults = FaultSchedule::default().crash_on_send(Pid::Tm(0), "COMMIT").lead(Pid::Tm(1), 30);
        let o = run_3pc_backup(&[Vote::Prepared; 2], 1, false, with(faults)).unwrap();
        assert_eq!(o.rm_decision(), Some(Decision::Commit));
        assert!(o.blocked.is_empty() && o.agreement());
    }

    #[test]
    fn crash_before_replication_blocks() {
        let faults = FaultSchedule::default().crash_on_send(Pid::Tm(0), "DECISION").lead(Pid::Tm(1), 30);
        let o = run_3pc_backup(&[Vote::Prepared; 2], 1, false, with(faults)).unwrap();
        assert_eq!(o.blocked.len(), 2);
        assert_eq!(o.decisions[&Pid::Tm(1)], None);
    }

    #[test]
    fn naive_takeover_contradicts_a_slow_primary() {
        let slow = MsgMatcher { from: Some(Pid::Tm(0)), msg_type: Some("DECISION".into()), ..Default::default() };
        let faults = FaultSchedule::default().delay(slow, 20).lead(Pid::Tm(1), 6);
        let o = run_3pc_backup(&[Vote::Prepared; 2], 1, true, with(faults.clone())).unwrap();
        assert_eq!(o.decisions[&Pid::Tm(0)], Some(Decision::Commit));
        assert_eq!(o.decisions[&Pid::Tm(1)], Some(Decision::Abort));
        assert!(!o.agreement());
        let safe = run_3pc_backup(&[Vote::Prepared; 2], 1, false, with(faults)).unwrap();
        assert!(safe.agreement());
        assert_eq!(safe.rm_decision(), Some(Decision::Commit));
    }
}
