use alloc::collections::BTreeMap;
use alloc::string::String;

use super::{Decision, Pid};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum TraceEvent {
    Send { tick: u64, id: u64, from: Pid, to: Pid, msg_type: String, payload: String },
    Deliver { tick: u64, id: u64, from: Pid, to: Pid, msg_type: String, duplicate: bool },
    Drop { tick: u64, id: u64, from: Pid, to: Pid, msg_type: String },
    Crash { tick: u64, process: Pid },
    Recover { tick: u64, process: Pid },
    Lead { tick: u64, process: Pid },
    Decide { tick: u64, process: Pid, decision: Decision },
}

impl TraceEvent {
    pub fn tick(&self) -> u64 {
        match self {
            TraceEvent::Send { tick, .. }
            | TraceEvent::Deliver { tick, .. }
            | TraceEvent::Drop { tick, .. }
            | TraceEvent::Crash { tick, .. }
            | TraceEvent::Recover { tick, .. }
            | TraceEvent::Lead { tick, .. }
            | TraceEvent::Decide { tick, .. } => *tick,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum DelayError {
    #[error("trace has no resource manager decision")]
    IncompleteTrace,
}

/// Longest causal chain of one-way message delays ending in a resource
/// manager's decision, replayed from the trace alone. The client's request
/// does not count as a protocol delay.
pub fn count_delays(trace: &[TraceEvent]) -> Result<u64, DelayError> {
    chain(trace, false)
}

/// As [`count_delays`] but also counting the client's request that started
/// the commit.
pub fn count_delays_with_initiation(trace: &[TraceEvent]) -> Result<u64, DelayError> {
    chain(trace, true)
}

fn chain(trace: &[TraceEvent], initiation: bool) -> Result<u64, DelayError> {
    let mut clock: BTreeMap<Pid, u64> = BTreeMap::new();
    let mut depth: BTreeMap<u64, u64> = BTreeMap::new();
    let mut worst = None;
    for ev in trace {
        match ev {
            TraceEvent::Send { id, from, .. } => {
                let d = if *from == Pid::Client {
                    u64::from(initiation)
                } else {
                    clock.get(from).copied().unwrap_or(0) + 1
                };
                depth.insert(*id, d);
            }
            TraceEvent::Deliver { id, to, .. } => {
                let d = depth.get(id).copied().unwrap_or(0);
                let c = clock.entry(*to).or_default();
                *c = (*c).max(d);
            }
            TraceEvent::Decide { process: p @ Pid::Rm(_), .. } => {
                let c = clock.get(p).copied().unwrap_or(0);
                worst = Some(worst.map_or(c, |w: u64| w.max(c)));
            }
            _ => {}
        }
    }
    worst.ok_or(DelayError::IncompleteTrace)
}

/// Protocol messages delivered, excluding duplicates and the client's request.
pub fn count_messages(trace: &[TraceEvent]) -> usize {
    trace
        .iter()
        .filter(|e| matches!(e, TraceEvent::Deliver { from, duplicate: false, .. } if *from != Pid::Client))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_trace_is_incomplete() {
        assert_eq!(count_delays(&[]), Err(DelayError::IncompleteTrace));
        assert_eq!(count_messages(&[]), 0);
    }
}
