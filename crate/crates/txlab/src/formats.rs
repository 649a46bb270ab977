//! On-disk formats: JSON lines for histories, logs and traces, JSON for
//! version dumps, fault schedules, saga definitions and fitted slopes, CSV for
//! replication metrics.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use txlab_core::commit::Outcome;
use txlab_core::history::{History, HistoryEvent};
use txlab_core::lock::{Duration, LockEvent, LockEventKind, LockMode, Predicate, ResourceId, Target};
use txlab_core::mvcc::Version;
use txlab_core::replication::{Metrics, ReplicationConfig, Strategy, Sweep};
use txlab_core::saga::SagaStep;
use txlab_core::scenario::Artifact;
use txlab_core::sim::{Decision, FaultSchedule, Pid, TraceEvent};
use txlab_core::store::LogRecord;
use txlab_core::{Key, TxnId, Value};

/// A line that is not valid JSON for the expected record.
#[derive(Debug, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    /// 1-based.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<serde_json::Error> for FormatError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            return FormatError::Io(e.into());
        }
        FormatError::Parse(ParseError { line: e.line(), message: e.to_string() })
    }
}

/// Reads one record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(r: impl BufRead) -> Result<Vec<T>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| ParseError { line: i + 1, message: e.to_string() })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: impl IntoIterator<Item = T>) -> io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_history(r: impl BufRead) -> Result<History, FormatError> {
    Ok(History::from_events(read_jsonl::<HistoryEvent>(r)?))
}

pub fn write_history(w: impl Write, h: &History) -> io::Result<()> {
    write_jsonl(w, &h.events)
}

pub fn read_log(r: impl BufRead) -> Result<Vec<LogRecord>, FormatError> {
    read_jsonl(r)
}

pub fn write_log(w: impl Write, log: &[LogRecord]) -> io::Result<()> {
    write_jsonl(w, log)
}

/// One lock-table event. `resource` is the path from the root as an array,
/// since component names may themselves contain `/`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LockTraceLine {
    pub txn: TxnId,
    pub event: LockEventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource: Option<ResourceId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<Predicate>,
    #[serde(default)]
    pub mode: Option<LockMode>,
    #[serde(default)]
    pub duration: Option<Duration>,
    pub tick: u64,
}

impl From<&LockEvent> for LockTraceLine {
    fn from(e: &LockEvent) -> Self {
        let (resource, predicate) = match &e.target {
            Some(Target::Resource(r)) => (Some(r.clone()), None),
            Some(Target::Predicate(p)) => (None, Some(p.clone())),
            None => (None, None),
        };
        LockTraceLine { txn: e.txn, event: e.kind, resource, predicate, mode: e.mode, duration: e.duration, tick: e.tick }
    }
}

impl From<LockTraceLine> for LockEvent {
    fn from(l: LockTraceLine) -> Self {
        let target = match (l.resource, l.predicate) {
            (Some(r), _) => Some(Target::Resource(r)),
            (None, Some(p)) => Some(Target::Predicate(p)),
            (None, None) => None,
        };
        LockEvent { txn: l.txn, kind: l.event, target, mode: l.mode, duration: l.duration, tick: l.tick }
    }
}

pub fn write_lock_trace(w: impl Write, trace: &[LockEvent]) -> io::Result<()> {
    write_jsonl(w, trace.iter().map(LockTraceLine::from))
}

pub fn read_lock_trace(r: impl BufRead) -> Result<Vec<LockEvent>, FormatError> {
    Ok(read_jsonl::<LockTraceLine>(r)?.into_iter().map(LockEvent::from).collect())
}

pub fn write_versions(mut w: impl Write, versions: &BTreeMap<Key, Vec<Version>>) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut w, versions)?;
    w.write_all(b"\n")
}

pub fn read_versions(r: impl io::Read) -> Result<BTreeMap<Key, Vec<Version>>, FormatError> {
    Ok(serde_json::from_reader(r)?)
}

/// A message sent during a commit run, or a process's final decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CommitTraceLine {
    #[serde(rename_all = "camelCase")]
    Message { tick: u64, from: Pid, to: Pid, msg_type: String, txn: TxnId, payload: String },
    /// `decision` is null for a process that never decided.
    Decision { process: Pid, decision: Option<Decision> },
}

pub fn commit_trace(outcome: &Outcome, txn: TxnId) -> Vec<CommitTraceLine> {
    let messages = outcome.trace.iter().filter_map(|e| match e {
        TraceEvent::Send { tick, from, to, msg_type, payload, .. } => Some(CommitTraceLine::Message {
            tick: *tick,
            from: *from,
            to: *to,
            msg_type: msg_type.clone(),
            txn,
            payload: payload.clone(),
        }),
        _ => None,
    });
    let decisions = outcome.decisions.iter().map(|(p, d)| CommitTraceLine::Decision { process: *p, decision: *d });
    messages.chain(decisions).collect()
}

pub fn write_commit_trace(w: impl Write, outcome: &Outcome, txn: TxnId) -> io::Result<()> {
    write_jsonl(w, commit_trace(outcome, txn))
}

pub fn read_commit_trace(r: impl BufRead) -> Result<Vec<CommitTraceLine>, FormatError> {
    read_jsonl(r)
}

pub fn read_faults(r: impl io::Read) -> Result<FaultSchedule, FormatError> {
    Ok(serde_json::from_reader(r)?)
}

/// One replication run, in the metrics CSV layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsRow {
    pub strategy: Strategy,
    pub nodes: usize,
    pub txn_rate: f64,
    pub ops_per_txn: usize,
    pub db_size: usize,
    pub seed: u64,
    pub deadlocks: u64,
    pub reconciliations: u64,
    pub stale_reads: u64,
    pub total_work: u64,
}

impl MetricsRow {
    pub fn new(cfg: &ReplicationConfig, m: &Metrics) -> Self {
        MetricsRow {
            strategy: cfg.strategy,
            nodes: cfg.nodes,
            txn_rate: cfg.txn_rate,
            ops_per_txn: cfg.ops_per_txn,
            db_size: cfg.db_size,
            seed: cfg.seed,
            deadlocks: m.deadlocks,
            reconciliations: m.reconciliations,
            stale_reads: m.stale_reads,
            total_work: m.total_work,
        }
    }
}

pub const METRICS_HEADER: &str = "strategy,nodes,txnRate,opsPerTxn,dbSize,seed,deadlocks,reconciliations,staleReads,totalWork";

pub fn write_metrics(w: impl Write, rows: &[MetricsRow]) -> Result<(), FormatError> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(METRICS_HEADER.split(','))?;
    }
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics(r: impl io::Read) -> Result<Vec<MetricsRow>, FormatError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        // header is line 1
        rows.push(rec.map_err(|e| ParseError { line: i + 2, message: e.to_string() })?);
    }
    Ok(rows)
}

pub fn write_slopes(mut w: impl Write, sweeps: &[Sweep]) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut w, sweeps)?;
    w.write_all(b"\n")
}

pub fn read_slopes(r: impl io::Read) -> Result<Vec<Sweep>, FormatError> {
    Ok(serde_json::from_reader(r)?)
}

/// A saga definition: the starting state and the ordered steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SagaFile {
    #[serde(default)]
    pub initial: BTreeMap<Key, Value>,
    pub steps: Vec<SagaStep>,
}

pub fn read_saga(r: impl io::Read) -> Result<SagaFile, FormatError> {
    Ok(serde_json::from_reader(r)?)
}

/// Writes one scenario artifact under `dir` and returns its path.
pub fn write_artifact(dir: &Path, stem: &str, artifact: &Artifact) -> Result<PathBuf, FormatError> {
    let ext = match artifact {
        Artifact::Versions(_) | Artifact::Saga(_) => "json",
        _ => "jsonl",
    };
    let path = dir.join(format!("{stem}.{ext}"));
    let mut f = io::BufWriter::new(fs::File::create(&path)?);
    match artifact {
        Artifact::History(h) => write_history(&mut f, h)?,
        Artifact::LockTrace(t) => write_lock_trace(&mut f, t)?,
        Artifact::Versions(v) => write_versions(&mut f, v)?,
        Artifact::Log(l) => write_log(&mut f, l)?,
        Artifact::Commit(o) => write_commit_trace(&mut f, o, TxnId(1))?,
        Artifact::Saga(run) => {
            serde_json::to_writer_pretty(&mut f, run).map_err(io::Error::from)?;
            f.write_all(b"\n")?;
        }
    }
    f.flush()?;
    Ok(path)
}
