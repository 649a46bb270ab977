//! Spontaneous prepare: a resource manager that prepares as soon as it has
//! done some work, without waiting to hear that the transaction has finished
//! issuing updates, can commit a prepared state that misses later updates.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::sim::{Decision, Message, Node, Out, Pid, SimConfig, SimNet};

#[derive(Clone, Debug, PartialEq, Eq)]
enum Msg {
    Update(u32),
    UpdateAck(u32),
    Begin,
    Prepare,
    Prepared,
    Decided(Decision),
}

impl Message for Msg {
    fn msg_type(&self) -> &'static str {
        match self {
            Msg::Update(_) => "UPDATE",
            Msg::UpdateAck(_) => "UPDATE-ACK",
            Msg::Begin => "BEGIN-COMMIT",
            Msg::Prepare => "PREPARE",
            Msg::Prepared => "PREPARED",
            Msg::Decided(_) => "DECISION",
        }
    }
}

#[derive(Clone, Debug)]
enum HNode {
    Client { plan: Vec<(Pid, u32)>, next: usize },
    Tm { rms: Vec<Pid>, spontaneous: bool, begun: bool, prepared: BTreeSet<Pid>, decision: Option<Decision> },
    Rm { me: Pid, spontaneous: bool, working: Vec<u32>, prepared: Option<Vec<u32>>, installed: Vec<u32>, decision: Option<Decision> },
}

impl HNode {
    fn tm_check(&mut self, out: &mut Out<Msg>) {
        if let HNode::Tm { rms, begun: true, prepared, decision: decision @ None, .. } = self {
            if prepared.len() == rms.len() {
                *decision = Some(Decision::Commit);
                out.broadcast(rms.iter().copied(), Msg::Decided(Decision::Commit));
            }
        }
    }
}

impl Node for HNode {
    type Msg = Msg;

    fn pid(&self) -> Pid {
        match self {
            HNode::Client { .. } => Pid::Client,
            HNode::Tm { .. } => Pid::Tm(0),
            HNode::Rm { me, .. } => *me,
        }
    }

    fn on_start(&mut self, out: &mut Out<Msg>) {
        if let HNode::Client { plan, next } = self {
            out.send(plan[0].0, Msg::Update(plan[0].1));
            *next = 1;
        }
    }

    fn on_message(&mut self, from: Pid, msg: Msg, out: &mut Out<Msg>) {
        match (&mut *self, msg) {
            (HNode::Client { plan, next }, Msg::UpdateAck(_)) => {
                if let Some(&(rm, u)) = plan.get(*next) {
                    out.send(rm, Msg::Update(u));
                    *next += 1;
                } else {
                    out.send(Pid::Tm(0), Msg::Begin);
                }
            }
            (HNode::Tm { rms, spontaneous, begun, .. }, Msg::Begin) => {
                *begun = true;
                if !*spontaneous {
                    out.broadcast(rms.iter().copied(), Msg::Prepare);
                }
                self.tm_check(out);
            }
            (HNode::Tm { prepared, .. }, Msg::Prepared) => {
                prepared.insert(from);
                self.tm_check(out);
            }
            (HNode::Rm { spontaneous, working, prepared, .. }, Msg::Update(u)) => {
                working.push(u);
                out.send(Pid::Client, Msg::UpdateAck(u));
                if *spontaneous && prepared.is_none() {
                    *prepared = Some(working.clone());
                    out.send(Pid::Tm(0), Msg::Prepared);
                }
            }
            (HNode::Rm { working, prepared, .. }, Msg::Prepare) => {
                if prepared.is_none() {
                    *prepared = Some(working.clone());
                    out.send(Pid::Tm(0), Msg::Prepared);
                }
            }
            (HNode::Rm { prepared, installed, decision, .. }, Msg::Decided(d)) => {
                if d == Decision::Commit {
                    *installed = prepared.clone().unwrap_or_default();
                }
                *decision = Some(d);
            }
            _ => {}
        }
    }

    fn on_crash(&mut self) {}

    fn decision(&self) -> Option<Decision> {
        match self {
            HNode::Tm { decision, .. } | HNode::Rm { decision, .. } => *decision,
            HNode::Client { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HazardOutcome {
    pub decision: Option<Decision>,
    /// Updates the client issued and saw acknowledged.
    pub issued: Vec<u32>,
    /// Updates made durable by the commit.
    pub installed: Vec<u32>,
    /// Acknowledged updates that the commit did not install.
    pub lost: Vec<u32>,
}

/// Runs a transaction that sends updates 1 and 2 to `rm0` and 3 to `rm1`,
/// one at a time, then asks to commit. With `spontaneous` the resource
/// managers prepare on their first update instead of on request.
pub fn spontaneous_prepare(spontaneous: bool) -> HazardOutcome {
    let plan = alloc::vec![(Pid::Rm(0), 1), (Pid::Rm(0), 2), (Pid::Rm(1), 3)];
    let rms = alloc::vec![Pid::Rm(0), Pid::Rm(1)];
    let mut nodes = alloc::vec![
        HNode::Client { plan: plan.clone(), next: 0 },
        HNode::Tm { rms: rms.clone(), spontaneous, begun: false, prepared: BTreeSet::new(), decision: None },
    ];
    nodes.extend(rms.iter().map(|&me| HNode::Rm {
        me,
        spontaneous,
        working: Vec::new(),
        prepared: None,
        installed: Vec::new(),
        decision: None,
    }));
    let r = SimNet::new(nodes, SimConfig::default()).run();
    let issued: Vec<u32> = plan.iter().map(|p| p.1).collect();
    let mut installed = Vec::new();
    for n in r.nodes.values() {
        if let HNode::Rm { installed: i, .. } = n {
            installed.extend(i);
        }
    }
    installed.sort_unstable();
    let lost = issued.iter().filter(|u| !installed.contains(*u)).copied().collect();
    HazardOutcome { decision: r.decision(Pid::Tm(0)), issued, installed, lost }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spontaneous_prepare_loses_a_late_update() {
        let o = spontaneous_prepare(true);
        assert_eq!(o.decision, Some(Decision::Commit));
        assert_eq!(o.lost, [2]);
    }

    #[test]
    fn prepare_on_request_keeps_everything() {
        let o = spontaneous_prepare(false);
        assert_eq!(o.decision, Some(Decision::Commit));
        assert!(o.lost.is_empty());
        assert_eq!(o.installed, [1, 2, 3]);
    }
}
