//! Deterministic discrete-event message fabric.
//!
//! Processes are state machines behind the [`Node`] trait. The simulator owns
//! the clock, the event queue ordered by `(tick, seq)`, the fault schedule and
//! the trace. Every message carries a causal depth (one more than the
//! sender's depth when it sent), which is how one-way message delays are
//! counted independently of wall-clock ticks.

mod faults;
mod trace;

pub use faults::{CrashAt, CrashOnSend, DelayRule, FaultSchedule, LeaderChange, MsgMatcher};
pub use trace::{count_delays, count_delays_with_initiation, count_messages, DelayError, TraceEvent};

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::types::digest;

/// Process identity. Transaction managers (and Paxos leaders) are `Tm`,
/// resource managers `Rm`, acceptors `Acceptor`; `Client` initiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pid {
    Client,
    Tm(u8),
    Rm(u8),
    Acceptor(u8),
}

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pid::Client => f.write_str("client"),
            Pid::Tm(i) => write!(f, "tm{i}"),
            Pid::Rm(i) => write!(f, "rm{i}"),
            Pid::Acceptor(i) => write!(f, "acc{i}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown process name {0:?}")]
pub struct PidParseError(pub String);

impl FromStr for Pid {
    type Err = PidParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "client" {
            return Ok(Pid::Client);
        }
        let err = || PidParseError(s.into());
        let split = s.find(|c: char| c.is_ascii_digit()).ok_or_else(err)?;
        let n: u8 = s[split..].parse().map_err(|_| err())?;
        match &s[..split] {
            "tm" => Ok(Pid::Tm(n)),
            "rm" => Ok(Pid::Rm(n)),
            "acc" => Ok(Pid::Acceptor(n)),
            _ => Err(err()),
        }
    }
}

#[cfg(feature = "serde")]
impl serde::Serialize for Pid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[cfg(feature = "serde")]
impl<'de> serde::Deserialize<'de> for Pid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <String as serde::Deserialize>::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Decision {
    Commit,
    Abort,
}

/// Message types name themselves for traces and fault matching.
pub trait Message: Clone + fmt::Debug {
    fn msg_type(&self) -> &'static str;
}

/// Effects requested by a handler. Stable writes happen inside the handler,
/// before any of these sends leave the process.
#[derive(Debug)]
pub struct Out<M> {
    sends: Vec<(Pid, M)>,
    timers: Vec<(u64, u32)>,
}

impl<M> Default for Out<M> {
    fn default() -> Self {
        Out { sends: Vec::new(), timers: Vec::new() }
    }
}

impl<M: Clone> Out<M> {
    pub fn send(&mut self, to: Pid, msg: M) {
        self.sends.push((to, msg));
    }

    pub fn broadcast(&mut self, to: impl IntoIterator<Item = Pid>, msg: M) {
        for p in to {
            self.sends.push((p, msg.clone()));
        }
    }

    /// Fires `on_timer(id)` after `after` ticks unless the process crashes first.
    pub fn timer(&mut self, after: u64, id: u32) {
        self.timers.push((after, id));
    }
}

pub trait Node {
    type Msg: Message;
    fn pid(&self) -> Pid;
    fn on_start(&mut self, _out: &mut Out<Self::Msg>) {}
    fn on_message(&mut self, from: Pid, msg: Self::Msg, out: &mut Out<Self::Msg>);
    fn on_timer(&mut self, _id: u32, _out: &mut Out<Self::Msg>) {}
    /// Discards volatile state; stable state must survive.
    fn on_crash(&mut self);
    fn on_recover(&mut self, _out: &mut Out<Self::Msg>) {}
    /// The schedule names this process leader.
    fn on_lead(&mut self, _out: &mut Out<Self::Msg>) {}
    /// Decision recorded in stable storage, if any.
    fn decision(&self) -> Option<Decision> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimConfig {
    pub seed: u64,
    /// Extra random latency per message, uniformly in `0..=jitter` ticks.
    pub jitter: u64,
    /// Simulation stops once the next event lies beyond this tick.
    pub horizon: u64,
    pub faults: FaultSchedule,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { seed: 0, jitter: 0, horizon: 200, faults: FaultSchedule::default() }
    }
}

#[derive(Clone, Debug)]
enum Event<M> {
    Start(Pid),
    Deliver { id: u64, from: Pid, to: Pid, msg: M, depth: u64, duplicate: bool },
    Timer { pid: Pid, id: u32, epoch: u64 },
    Crash(Pid),
    Recover(Pid),
    Lead(Pid),
}

/// Everything a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct SimResult<N> {
    pub nodes: BTreeMap<Pid, N>,
    pub trace: Vec<TraceEvent>,
    /// First stable decision per process with the causal depth at which it was reached.
    pub decided: BTreeMap<Pid, (Decision, u64)>,
    /// Processes down when the run ended.
    pub down: BTreeSet<Pid>,
    /// Stable decisions that changed.
    pub violations: Vec<String>,
    pub ticks: u64,
}

impl<N> SimResult<N> {
    pub fn trace_hash(&self) -> u64 {
        digest(&self.trace)
    }

    pub fn decision(&self, p: Pid) -> Option<Decision> {
        self.decided.get(&p).map(|d| d.0)
    }
}

pub struct SimNet<N: Node> {
    nodes: BTreeMap<Pid, N>,
    down: BTreeSet<Pid>,
    /// Leadership handed to a process while it was down, applied on recovery.
    pending_lead: BTreeSet<Pid>,
    epoch: BTreeMap<Pid, u64>,
    clock: BTreeMap<Pid, u64>,
    queue: BTreeMap<(u64, u64), Event<N::Msg>>,
    seq: u64,
    next_id: u64,
    tick: u64,
    rng: ChaCha8Rng,
    cfg: SimConfig,
    matched: BTreeMap<(u8, usize), usize>,
    trace: Vec<TraceEvent>,
    decided: BTreeMap<Pid, (Decision, u64)>,
    violations: Vec<String>,
}

impl<N: Node> SimNet<N> {
    pub fn new(nodes: impl IntoIterator<Item = N>, cfg: SimConfig) -> Self {
        let nodes: BTreeMap<Pid, N> = nodes.into_iter().map(|n| (n.pid(), n)).collect();
        let mut sim = SimNet {
            down: BTreeSet::new(),
            pending_lead: BTreeSet::new(),
            epoch: BTreeMap::new(),
            clock: BTreeMap::new(),
            queue: BTreeMap::new(),
            seq: 0,
            next_id: 0,
            tick: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            matched: BTreeMap::new(),
            trace: Vec::new(),
            decided: BTreeMap::new(),
            violations: Vec::new(),
            cfg,
            nodes,
        };
        let pids: Vec<Pid> = sim.nodes.keys().copied().collect();
        for p in pids {
            sim.push(0, Event::Start(p));
        }
        for c in sim.cfg.faults.crashes.clone() {
            sim.push(c.at_tick, Event::Crash(c.process));
        }
        for r in sim.cfg.faults.recoveries.clone() {
            sim.push(r.at_tick, Event::Recover(r.process));
        }
        for l in sim.cfg.faults.leader_changes.clone() {
            sim.push(l.at_tick, Event::Lead(l.process));
        }
        sim
    }

    fn push(&mut self, tick: u64, ev: Event<N::Msg>) {
        self.seq += 1;
        self.queue.insert((tick, self.seq), ev);
    }

    /// Counts a match of rule `idx` in `table` and reports whether it fires.
    fn fires(&mut self, table: u8, idx: usize, nth: Option<usize>) -> bool {
        let c = self.matched.entry((table, idx)).or_default();
        *c += 1;
        nth.is_none_or(|n| *c == n)
    }

    pub fn run(mut self) -> SimResult<N> {
        while let Some((&(tick, seq), _)) = self.queue.first_key_value() {
            if tick > self.cfg.horizon {
                break;
            }
            let ev = self.queue.remove(&(tick, seq)).expect("present");
            self.tick = tick;
            self.dispatch(ev);
        }
        SimResult {
            nodes: self.nodes,
            trace: self.trace,
            decided: self.decided,
            down: self.down,
            violations: self.violations,
            ticks: self.tick,
        }
    }

    fn dispatch(&mut self, ev: Event<N::Msg>) {
        match ev {
            Event::Start(p) => self.invoke(p, |n, out| n.on_start(out)),
            Event::Deliver { id, from, to, msg, depth, duplicate } => {
                let msg_type = String::from(msg.msg_type());
                if self.down.contains(&to) || !self.nodes.contains_key(&to) {
                    self.trace.push(TraceEvent::Drop { tick: self.tick, id, from, to, msg_type });
                    return;
                }
                self.trace.push(TraceEvent::Deliver { tick: self.tick, id, from, to, msg_type, duplicate });
                let c = self.clock.entry(to).or_default();
                *c = (*c).max(depth);
                self.invoke(to, |n, out| n.on_message(from, msg, out));
            }
            Event::Timer { pid, id, epoch } => {
                if self.epoch.get(&pid).copied().unwrap_or(0) == epoch {
                    self.invoke(pid, |n, out| n.on_timer(id, out));
                }
            }
            Event::Crash(p) => self.crash(p),
            Event::Recover(p) => {
                if self.down.remove(&p) {
                    self.trace.push(TraceEvent::Recover { tick: self.tick, process: p });
                    self.invoke(p, |n, out| n.on_recover(out));
                    if self.pending_lead.remove(&p) {
                        self.dispatch(Event::Lead(p));
                    }
                }
            }
            Event::Lead(p) if self.down.contains(&p) => {
                self.pending_lead.insert(p);
            }
            Event::Lead(p) => {
                self.trace.push(TraceEvent::Lead { tick: self.tick, process: p });
                self.invoke(p, |n, out| n.on_lead(out));
            }
        }
    }

    fn crash(&mut self, p: Pid) {
        if !self.nodes.contains_key(&p) || !self.down.insert(p) {
            return;
        }
        *self.epoch.entry(p).or_default() += 1;
        self.trace.push(TraceEvent::Crash { tick: self.tick, process: p });
        self.nodes.get_mut(&p).expect("known").on_crash();
        self.check_decision(p);
    }

    fn check_decision(&mut self, p: Pid) {
        let now = self.nodes[&p].decision();
        match (self.decided.get(&p), now) {
            (None, Some(d)) => {
                let depth = self.clock.get(&p).copied().unwrap_or(0);
                self.decided.insert(p, (d, depth));
                self.trace.push(TraceEvent::Decide { tick: self.tick, process: p, decision: d });
            }
            (Some((d, _)), now) if now != Some(*d) => {
                self.violations.push(format!("{p} changed its stable decision from {d:?} to {now:?}"));
            }
            _ => {}
        }
    }

    fn invoke(&mut self, p: Pid, f: impl FnOnce(&mut N, &mut Out<N::Msg>)) {
        if self.down.contains(&p) {
            return;
        }
        let Some(node) = self.nodes.get_mut(&p) else { return };
        let mut out = Out::default();
        f(node, &mut out);
        self.check_decision(p);
        let depth = if p == Pid::Client { 0 } else { self.clock.get(&p).copied().unwrap_or(0) + 1 };
        for (to, msg) in out.sends {
            let msg_type = msg.msg_type();
            let rules = self.cfg.faults.crash_on_send.clone();
            let crash = rules.iter().enumerate().any(|(i, r)| {
                r.process == p && r.msg_type == msg_type && self.fires(0, i, Some(r.nth.unwrap_or(1)))
            });
            if crash {
                self.crash(p);
                return;
            }
            self.next_id += 1;
            let id = self.next_id;
            self.trace.push(TraceEvent::Send {
                tick: self.tick,
                id,
                from: p,
                to,
                msg_type: msg_type.into(),
                payload: format!("{msg:?}"),
            });
            let drops = self.cfg.faults.drops.clone();
            if drops.iter().enumerate().any(|(i, m)| m.matches(p, to, msg_type) && self.fires(1, i, m.nth)) {
                self.trace.push(TraceEvent::Drop { tick: self.tick, id, from: p, to, msg_type: msg_type.into() });
                continue;
            }
            let mut latency = 1;
            if self.cfg.jitter > 0 {
                latency += self.rng.random_range(0..=self.cfg.jitter);
            }
            let delays = self.cfg.faults.delays.clone();
            for (i, d) in delays.iter().enumerate() {
                if d.matcher.matches(p, to, msg_type) && self.fires(2, i, d.matcher.nth) {
                    latency += d.ticks;
                }
            }
            let tick = self.tick + latency;
            self.push(tick, Event::Deliver { id, from: p, to, msg: msg.clone(), depth, duplicate: false });
            let dups = self.cfg.faults.duplicates.clone();
            if dups.iter().enumerate().any(|(i, m)| m.matches(p, to, msg_type) && self.fires(3, i, m.nth)) {
                self.push(tick + 1, Event::Deliver { id, from: p, to, msg, depth, duplicate: true });
            }
        }
        let epoch = self.epoch.get(&p).copied().unwrap_or(0);
        for (after, id) in out.timers {
            self.push(self.tick + after.max(1), Event::Timer { pid: p, id, epoch });
        }
    }
}
