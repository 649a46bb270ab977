use alloc::string::String;
use alloc::vec::Vec;

use super::Pid;

/// Selects messages by sender, receiver and type; unset fields match anything.
/// With `nth` set only the nth matching message is affected (1-based).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase", default))]
pub struct MsgMatcher {
    pub from: Option<Pid>,
    pub to: Option<Pid>,
    pub msg_type: Option<String>,
    pub nth: Option<usize>,
}

impl MsgMatcher {
    pub fn matches(&self, from: Pid, to: Pid, msg_type: &str) -> bool {
        self.from.is_none_or(|f| f == from)
            && self.to.is_none_or(|t| t == to)
            && self.msg_type.as_deref().is_none_or(|m| m == msg_type)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct CrashAt {
    pub process: Pid,
    pub at_tick: u64,
}

/// The process crashes instead of sending its nth message of `msg_type`.
/// Whatever it wrote to stable storage in that step survives.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct CrashOnSend {
    pub process: Pid,
    pub msg_type: String,
    #[cfg_attr(feature = "serde", serde(default))]
    pub nth: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct DelayRule {
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub matcher: MsgMatcher,
    pub ticks: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct LeaderChange {
    pub process: Pid,
    pub at_tick: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase", default))]
pub struct FaultSchedule {
    pub crashes: Vec<CrashAt>,
    pub recoveries: Vec<CrashAt>,
    pub crash_on_send: Vec<CrashOnSend>,
    pub drops: Vec<MsgMatcher>,
    pub delays: Vec<DelayRule>,
    pub duplicates: Vec<MsgMatcher>,
    pub leader_changes: Vec<LeaderChange>,
}

impl FaultSchedule {
    pub fn is_empty(&self) -> bool {
        *self == FaultSchedule::default()
    }

    pub fn crash(mut self, process: Pid, at_tick: u64) -> Self {
        self.crashes.push(CrashAt { process, at_tick });
        self
    }

    pub fn recover(mut self, process: Pid, at_tick: u64) -> Self {
        self.recoveries.push(CrashAt { process, at_tick });
        self
    }

    pub fn crash_on_send(mut self, process: Pid, msg_type: &str) -> Self {
        self.crash_on_send.push(CrashOnSend { process, msg_type: msg_type.into(), nth: None });
        self
    }

    pub fn lead(mut self, process: Pid, at_tick: u64) -> Self {
        self.leader_changes.push(LeaderChange { process, at_tick });
        self
    }

    pub fn delay(mut self, matcher: MsgMatcher, ticks: u64) -> Self {
        self.delays.push(DelayRule { matcher, ticks });
        self
    }
}
