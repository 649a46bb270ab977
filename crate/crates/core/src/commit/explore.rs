//! Exhaustive and randomized fault-schedule exploration.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{run_commit, Outcome, Protocol, Vote, TIMEOUT};
use crate::sim::{FaultSchedule, MsgMatcher, Pid, SimConfig};

/// Bounds of the exhaustive search.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExploreSpace {
    pub rms: usize,
    pub max_crashes: usize,
    /// Crash ticks tried, `0..=last_crash_tick`.
    pub last_crash_tick: u64,
    /// Recovery offsets tried; `None` means the process stays down.
    pub recoveries: Vec<Option<u64>>,
}

impl Default for ExploreSpace {
    fn default() -> Self {
        ExploreSpace { rms: 2, max_crashes: 2, last_crash_tick: 6, recoveries: alloc::vec![None, Some(3)] }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ExploreReport {
    pub runs: usize,
    pub agreement_violations: Vec<FaultSchedule>,
    pub validity_violations: Vec<FaultSchedule>,
    pub stability_violations: Vec<FaultSchedule>,
    /// Schedules that left a live resource manager undecided.
    pub blocking: Vec<FaultSchedule>,
    /// Blocking schedules that crash at most F acceptors and leave some
    /// leader up; only meaningful for Paxos Commit.
    pub nonblocking_violations: Vec<FaultSchedule>,
}

impl ExploreReport {
    pub fn safe(&self) -> bool {
        self.agreement_violations.is_empty() && self.validity_violations.is_empty() && self.stability_violations.is_empty()
    }

    fn absorb(&mut self, protocol: Protocol, faults: &FaultSchedule, o: &Outcome) {
        self.runs += 1;
        if !o.agreement() {
            self.agreement_violations.push(faults.clone());
        }
        if !o.validity() {
            self.validity_violations.push(faults.clone());
        }
        if !o.stable() {
            self.stability_violations.push(faults.clone());
        }
        if !o.blocked.is_empty() {
            self.blocking.push(faults.clone());
            if let Protocol::PaxosCommit { f, .. } = protocol {
                if qualifies(f, protocol.tms().len(), faults) {
                    self.nonblocking_violations.push(faults.clone());
                }
            }
        }
    }
}

/// At most `f` acceptors ever crash and not every leader stays down.
fn qualifies(f: usize, tms: usize, faults: &FaultSchedule) -> bool {
    let crashed_acceptors = faults.crashes.iter().filter(|c| matches!(c.process, Pid::Acceptor(_))).count();
    let dead_tms = faults
        .crashes
        .iter()
        .filter(|c| matches!(c.process, Pid::Tm(_)) && !faults.recoveries.iter().any(|r| r.process == c.process))
        .count();
    crashed_acceptors <= f && dead_tms < tms
}

/// Hands leadership to the first standby when the primary stays down.
fn elect(protocol: Protocol, mut faults: FaultSchedule) -> FaultSchedule {
    let standby = protocol.tms().get(1).copied();
    let dead = faults.crashes.iter().find(|c| c.process == Pid::Tm(0)).map(|c| c.at_tick);
    let recovers = faults.recoveries.iter().any(|r| r.process == Pid::Tm(0));
    if let (Some(s), Some(at), false) = (standby, dead, recovers) {
        faults = faults.lead(s, at + TIMEOUT);
    }
    faults
}

fn delay_profiles() -> [FaultSchedule; 3] {
    let slow_rm = MsgMatcher { from: Some(Pid::Rm(1)), ..Default::default() };
    let dup_to_leader = MsgMatcher { to: Some(Pid::Tm(0)), ..Default::default() };
    let mut dups = FaultSchedule::default();
    dups.duplicates.push(dup_to_leader);
    [FaultSchedule::default(), FaultSchedule::default().delay(slow_rm, TIMEOUT + 2), dups]
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return alloc::vec![Vec::new()];
    }
    let mut out = Vec::new();
    for first in 0..n {
        for mut rest in subsets(n, k - 1) {
            if rest.first().is_none_or(|&r| r > first) {
                rest.insert(0, first);
                out.push(rest);
            }
        }
    }
    out
}

/// Every schedule in `space` for every vote pattern and delay profile.
pub fn explore(protocol: Protocol, space: &ExploreSpace) -> ExploreReport {
    let mut procs = protocol.tms();
    procs.extend((0..space.rms as u8).map(Pid::Rm));
    procs.extend(protocol.acceptors());
    let vote_sets = [alloc::vec![Vote::Prepared; space.rms], {
        let mut v = alloc::vec![Vote::Prepared; space.rms];
        v[space.rms - 1] = Vote::Aborted;
        v
    }];
    let ticks = space.last_crash_tick + 1;
    let rec = space.recoveries.len();
    let mut report = ExploreReport::default();
    for k in 0..=space.max_crashes.min(procs.len()) {
        for who in subsets(procs.len(), k) {
            // mixed-radix counter over (tick, recovery) per crashed process
            let combos = (ticks as usize * rec).pow(k as u32);
            for mut code in 0..combos {
                let mut faults = FaultSchedule::default();
                for &p in &who {
                    let tick = (code % ticks as usize) as u64;
                    code /= ticks as usize;
                    let recovery = space.recoveries[code % rec];
                    code /= rec;
                    faults = faults.crash(procs[p], tick);
                    if let Some(after) = recovery {
                        faults = faults.recover(procs[p], tick + after);
                    }
                }
                let faults = elect(protocol, faults);
                for profile in delay_profiles() {
                    let mut f = faults.clone();
                    f.delays.extend(profile.delays);
                    f.duplicates.extend(profile.duplicates);
                    for votes in &vote_sets {
                        let o = run_commit(protocol, votes, SimConfig { faults: f.clone(), ..Default::default() })
                            .expect("valid configuration");
                        report.absorb(protocol, &f, &o);
                    }
                }
            }
        }
    }
    report
}

/// `count` random schedules on 2 to 5 resource managers with crashes,
/// recoveries, drops, delays, duplicates and latency jitter.
pub fn random_schedules(protocol: Protocol, count: usize, seed: u64) -> ExploreReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ExploreReport::default();
    for _ in 0..count {
        let n = rng.random_range(2..=5usize);
        let votes: Vec<Vote> =
            (0..n).map(|_| if rng.random_bool(0.15) { Vote::Aborted } else { Vote::Prepared }).collect();
        let mut procs = protocol.tms();
        procs.extend((0..n as u8).map(Pid::Rm));
        procs.extend(protocol.acceptors());
        let mut faults = FaultSchedule::default();
        let crashes = rng.random_range(0..=3usize);
        for _ in 0..crashes {
            let p = procs[rng.random_range(0..procs.len())];
            if faults.crashes.iter().any(|c| c.process == p) {
                continue;
            }
            let at = rng.random_range(0..30);
            faults = faults.crash(p, at);
            if rng.random_bool(0.6) {
                faults = faults.recover(p, at + rng.random_range(1..30));
            }
        }
        for _ in 0..rng.random_range(0..3) {
            let m = MsgMatcher { from: Some(procs[rng.random_range(0..procs.len())]), nth: Some(rng.random_range(1..4)), ..Default::default() };
            match rng.random_range(0..3) {
                0 => faults.drops.push(m),
                1 => faults = faults.delay(m, rng.random_range(1..25)),
                _ => faults.duplicates.push(m),
            }
        }
        let faults = elect(protocol, faults);
        let sim = SimConfig { seed: rng.random(), jitter: rng.random_range(0..4), horizon: 400, faults: faults.clone() };
        let o = run_commit(protocol, &votes, sim).expect("valid configuration");
        report.absorb(protocol, &faults, &o);
    }
    report
}
