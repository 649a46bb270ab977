//! Command-line front end. Every command writes its report to the given
//! writer and returns whether its assertions held.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use txlab_core::commit::{run_commit, Protocol, Variant, Vote};
use txlab_core::engine::{Isolation, PhantomMode};
use txlab_core::history::{classify_ansi_level, detect_anomalies, is_serializable, AnsiLevel, Anomaly, History};
use txlab_core::lock::Degree;
use txlab_core::replication::{run_replication, summarize, Metrics, ReplicationConfig, Strategy, Sweep, SweepAxis};
use txlab_core::saga::{run_saga, run_saga_failing_at, SagaOutcome};
use txlab_core::scenario::{run_scenario, SCENARIOS};
use txlab_core::sim::{Decision, FaultSchedule, Pid, SimConfig};
use txlab_core::store::Store;
use txlab_core::workload::{run_workload, WorkloadSpec};
use txlab_core::TxnId;

use crate::formats::{self, MetricsRow};

#[derive(Debug, Parser)]
#[command(name = "txlab", version, about = "Deterministic transaction-processing lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a named scenario (or `all`) and check its assertions.
    RunScenario {
        name: String,
        /// Write histories, traces and dumps here.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
    /// Drive a random workload through one concurrency-control stack.
    RunWorkload {
        #[arg(long, value_enum, default_value = "d3")]
        isolation: IsolationArg,
        #[arg(long, value_enum, default_value = "predicate")]
        phantom: PhantomArg,
        #[arg(long, default_value_t = 100)]
        txns: usize,
        #[arg(long, default_value_t = 4)]
        ops: usize,
        #[arg(long, default_value_t = 8)]
        keys: usize,
        #[arg(long, default_value_t = 0.5)]
        read_frac: f64,
        #[arg(long, default_value_t = 0.2)]
        scan_frac: f64,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the history as JSON lines.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Simulate one replicated database and print its metrics as CSV.
    RunReplication {
        #[command(flatten)]
        params: ReplicationArgs,
        #[arg(long, value_enum, default_value = "eager-everywhere")]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 4)]
        nodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one atomic commit under a fault schedule.
    RunCommit {
        #[arg(long, value_enum, default_value = "2pc")]
        protocol: ProtocolArg,
        #[arg(long, default_value_t = 2)]
        rms: usize,
        /// Acceptor faults tolerated by Paxos Commit.
        #[arg(long, default_value_t = 1)]
        f: usize,
        /// Backup transaction managers for 3PC.
        #[arg(long, default_value_t = 1)]
        backups: usize,
        #[arg(long, value_enum, default_value = "classic")]
        variant: VariantArg,
        /// Resource managers that vote Aborted (0-based, repeatable).
        #[arg(long = "abort-rm")]
        abort_rms: Vec<usize>,
        /// Fault schedule as JSON.
        #[arg(long)]
        faults: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        jitter: u64,
        #[arg(long, default_value_t = 200)]
        horizon: u64,
        /// Write the message trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Judge a JSON-lines history.
    CheckHistory { file: PathBuf },
    /// Run a saga definition, optionally failing one step.
    RunSaga {
        file: PathBuf,
        #[arg(long)]
        fail_at: Option<usize>,
    },
    /// Sweep replication runs and fit log-log slopes.
    Sweep {
        #[arg(long)]
        out: PathBuf,
        /// Fitted slopes as JSON; defaults to the CSV path with a .json extension.
        #[arg(long)]
        slopes: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "nodes")]
        axis: AxisArg,
        /// Swept values; defaults to 2,4,8,16 nodes or 0.1,0.2,0.4,0.8 per tick.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Strategies to sweep; defaults to all four.
        #[arg(long, value_enum, value_delimiter = ',')]
        strategies: Vec<StrategyArg>,
        #[command(flatten)]
        params: ReplicationArgs,
        /// Node count when sweeping the rate.
        #[arg(long, default_value_t = 1)]
        nodes: usize,
        #[arg(long, default_value_t = 4)]
        seeds: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Debug, Clone, clap::Args)]
pub struct ReplicationArgs {
    /// Arrival rate per node per tick (system-wide with --total-load).
    #[arg(long, default_value_t = 0.02)]
    pub rate: f64,
    #[arg(long, default_value_t = 4)]
    pub ops: usize,
    #[arg(long, default_value_t = 1000)]
    pub db_size: usize,
    #[arg(long, default_value_t = 20_000)]
    pub duration: u64,
    #[arg(long, default_value_t = 5)]
    pub max_lag: u64,
    #[arg(long)]
    pub total_load: bool,
    #[arg(long)]
    pub insert_only: bool,
}

impl ReplicationArgs {
    fn config(&self, strategy: Strategy, nodes: usize, seed: u64) -> ReplicationConfig {
        ReplicationConfig {
            strategy,
            nodes,
            txn_rate: self.rate,
            ops_per_txn: self.ops,
            db_size: self.db_size,
            duration: self.duration,
            seed,
            max_lag: self.max_lag,
            insert_only: self.insert_only,
            total_load: self.total_load,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum IsolationArg {
    #[value(name = "D0", alias = "d0")]
    D0,
    #[value(name = "D1", alias = "d1")]
    D1,
    #[value(name = "D2", alias = "d2")]
    D2,
    #[value(name = "D3", alias = "d3")]
    D3,
    #[value(name = "SI", alias = "si")]
    Si,
}

impl From<IsolationArg> for Isolation {
    fn from(a: IsolationArg) -> Self {
        match a {
            IsolationArg::D0 => Isolation::Locking(Degree::D0),
            IsolationArg::D1 => Isolation::Locking(Degree::D1),
            IsolationArg::D2 => Isolation::Locking(Degree::D2),
            IsolationArg::D3 => Isolation::Locking(Degree::D3),
            IsolationArg::Si => Isolation::Snapshot,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PhantomArg {
    Record,
    Predicate,
    Hierarchy,
}

impl From<PhantomArg> for PhantomMode {
    fn from(a: PhantomArg) -> Self {
        match a {
            PhantomArg::Record => PhantomMode::RecordOnly,
            PhantomArg::Predicate => PhantomMode::Predicate,
            PhantomArg::Hierarchy => PhantomMode::Hierarchy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum StrategyArg {
    EagerEverywhere,
    EagerPrimary,
    LazyEverywhere,
    LazyPrimary,
}

impl From<StrategyArg> for Strategy {
    fn from(a: StrategyArg) -> Self {
        match a {
            StrategyArg::EagerEverywhere => Strategy::EagerEverywhere,
            StrategyArg::EagerPrimary => Strategy::EagerPrimary,
            StrategyArg::LazyEverywhere => Strategy::LazyEverywhere,
            StrategyArg::LazyPrimary => Strategy::LazyPrimary,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProtocolArg {
    #[value(name = "2pc")]
    TwoPc,
    #[value(name = "3pc")]
    ThreePc,
    PaxosCommit,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Classic,
    AcceptorBroadcast,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AxisArg {
    Nodes,
    Rate,
}

/// Verdicts printed by `check-history`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HistoryVerdict {
    pub serializable: bool,
    pub ansi_level: AnsiLevel,
    pub anomalies: Vec<Anomaly>,
}

pub fn judge(h: &History) -> anyhow::Result<HistoryVerdict> {
    Ok(HistoryVerdict {
        serializable: is_serializable(h)?,
        ansi_level: classify_ansi_level(h),
        anomalies: detect_anomalies(h).into_iter().collect(),
    })
}

/// Runs a parsed command line; `Ok(true)` iff every assertion held.
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<bool> {
    match cli.command {
        Command::RunScenario { name, trace_dir } => scenario(&name, trace_dir.as_deref(), out),
        Command::RunWorkload { isolation, phantom, txns, ops, keys, read_frac, scan_frac, concurrency, seed, history } => {
            let spec = WorkloadSpec {
                txn_count: txns,
                ops_per_txn: ops,
                key_space: keys,
                read_fraction: read_frac,
                scan_fraction: scan_frac,
                isolation: isolation.into(),
                phantom: phantom.into(),
                concurrency,
                seed,
                ..Default::default()
            };
            workload(&spec, history.as_deref(), out)
        }
        Command::RunReplication { params, strategy, nodes, seed } => {
            let cfg = params.config(strategy.into(), nodes, seed);
            let m = run_replication(&cfg)?.metrics;
            formats::write_metrics(&mut *out, &[MetricsRow::new(&cfg, &m)])?;
            Ok(true)
        }
        Command::RunCommit { protocol, rms, f, backups, variant, abort_rms, faults, seed, jitter, horizon, trace } => {
            let variant = match variant {
                VariantArg::Classic => Variant::Classic,
                VariantArg::AcceptorBroadcast => Variant::AcceptorBroadcast,
            };
            let protocol = match protocol {
                ProtocolArg::TwoPc => Protocol::TwoPhase,
                ProtocolArg::ThreePc => Protocol::ThreePhaseBackup { backups, naive_takeover: false },
                ProtocolArg::PaxosCommit => Protocol::PaxosCommit { f, variant },
            };
            let votes: Vec<Vote> = (0..rms).map(|i| if abort_rms.contains(&i) { Vote::Aborted } else { Vote::Prepared }).collect();
            let faults = match faults {
                Some(p) => formats::read_faults(open(&p)?).with_context(|| p.display().to_string())?,
                None => FaultSchedule::default(),
            };
            commit(protocol, &votes, SimConfig { seed, jitter, horizon, faults }, trace.as_deref(), out)
        }
        Command::CheckHistory { file } => {
            let h = formats::read_history(BufReader::new(open(&file)?)).with_context(|| file.display().to_string())?;
            serde_json::to_writer(&mut *out, &judge(&h)?)?;
            writeln!(out)?;
            Ok(true)
        }
        Command::RunSaga { file, fail_at } => {
            let def = formats::read_saga(open(&file)?).with_context(|| file.display().to_string())?;
            let mut store = Store::new();
            if !def.initial.is_empty() {
                let t = store.begin();
                for (k, v) in def.initial {
                    store.write(t, k, v)?;
                }
                store.commit(t)?;
            }
            let run = match fail_at {
                Some(k) => run_saga_failing_at(&mut store, &def.steps, k)?,
                None => run_saga(&mut store, &def.steps)?,
            };
            serde_json::to_writer_pretty(&mut *out, &serde_json::json!({ "run": run, "state": store.stable() }))?;
            writeln!(out)?;
            Ok(!matches!(run.outcome, SagaOutcome::CompensationFailed { .. }))
        }
        Command::Sweep { out: csv_path, slopes, axis, values, strategies, params, nodes, seeds, jobs } => {
            let axis = match axis {
                AxisArg::Nodes => SweepAxis::Nodes,
                AxisArg::Rate => SweepAxis::TxnRate,
            };
            let values = if !values.is_empty() {
                values
            } else if axis == SweepAxis::Nodes {
                vec![2.0, 4.0, 8.0, 16.0]
            } else {
                vec![0.1, 0.2, 0.4, 0.8]
            };
            let strategies: Vec<Strategy> =
                if strategies.is_empty() { Strategy::ALL.to_vec() } else { strategies.into_iter().map(Strategy::from).collect() };
            let mut configs = Vec::new();
            for &s in &strategies {
                for &x in &values {
                    for seed in 0..seeds {
                        configs.push(ReplicationConfig { seed, ..axis.apply(&params.config(s, nodes, seed), x) });
                    }
                }
            }
            let runs = run_parallel(&configs, jobs)?;
            let rows: Vec<MetricsRow> = configs.iter().zip(&runs).map(|(c, m)| MetricsRow::new(c, m)).collect();
            formats::write_metrics(io::BufWriter::new(create(&csv_path)?), &rows)?;
            let sweeps: Vec<Sweep> = strategies
                .iter()
                .map(|&s| {
                    let tagged: Vec<(f64, Metrics)> = configs
                        .iter()
                        .zip(&runs)
                        .filter(|(c, _)| c.strategy == s)
                        .map(|(c, m)| (if axis == SweepAxis::Nodes { c.nodes as f64 } else { c.txn_rate }, m.clone()))
                        .collect();
                    summarize(s, axis, &tagged)
                })
                .collect();
            let slopes = slopes.unwrap_or_else(|| csv_path.with_extension("json"));
            formats::write_slopes(io::BufWriter::new(create(&slopes)?), &sweeps)?;
            for s in &sweeps {
                let f = |v: Option<f64>| v.map_or_else(|| String::from("n/a"), |v| format!("{v:.3}"));
                writeln!(
                    out,
                    "{}: work slope {}, deadlock slope {}, reconciliation slope {}",
                    s.strategy,
                    f(s.work_slope),
                    f(s.deadlock_slope),
                    f(s.reconciliation_slope)
                )?;
            }
            Ok(true)
        }
    }
}

fn open(p: &Path) -> anyhow::Result<fs::File> {
    fs::File::open(p).with_context(|| format!("opening {}", p.display()))
}

fn create(p: &Path) -> anyhow::Result<fs::File> {
    fs::File::create(p).with_context(|| format!("creating {}", p.display()))
}

fn scenario(name: &str, trace_dir: Option<&Path>, out: &mut dyn Write) -> anyhow::Result<bool> {
    let names: Vec<&str> = if name == "all" { SCENARIOS.to_vec() } else { vec![name] };
    let mut passed = true;
    for n in names {
        let report = run_scenario(n)?;
        write!(out, "{report}")?;
        if let Some(dir) = trace_dir {
            let dir = dir.join(report.name);
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (stem, a) in &report.artifacts {
                formats::write_artifact(&dir, stem, a)?;
            }
        }
        passed &= report.passed();
    }
    Ok(passed)
}

/// Runs a workload and checks the guarantee its isolation level promises.
fn workload(spec: &WorkloadSpec, history: Option<&Path>, out: &mut dyn Write) -> anyhow::Result<bool> {
    let run = run_workload(spec)?;
    if let Some(p) = history {
        let mut w = io::BufWriter::new(create(p)?);
        formats::write_history(&mut w, &run.history)?;
        w.flush()?;
    }
    let verdict = judge(&run.history)?;
    let has = |a| verdict.anomalies.contains(&a);
    let holds = match spec.isolation {
        Isolation::Locking(Degree::D0) => true,
        Isolation::Locking(Degree::D1) => !has(Anomaly::DirtyWrite),
        Isolation::Locking(Degree::D2) => !has(Anomaly::DirtyWrite) && !has(Anomaly::DirtyRead),
        Isolation::Locking(Degree::D3) => verdict.serializable,
        Isolation::Snapshot => verdict.ansi_level == AnsiLevel::AnsiSerializable,
    };
    serde_json::to_writer(&mut *out, &serde_json::json!({ "metrics": run.metrics, "verdict": verdict, "guaranteeHolds": holds }))?;
    writeln!(out)?;
    Ok(holds)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct CommitSummary {
    decisions: BTreeMap<Pid, Option<Decision>>,
    delays: Option<u64>,
    delays_with_initiation: Option<u64>,
    messages: usize,
    blocked: Vec<Pid>,
    agreement: bool,
    validity: bool,
    stable: bool,
}

fn commit(protocol: Protocol, votes: &[Vote], sim: SimConfig, trace: Option<&Path>, out: &mut dyn Write) -> anyhow::Result<bool> {
    if votes.is_empty() {
        bail!("at least one resource manager is required");
    }
    let o = run_commit(protocol, votes, sim)?;
    if let Some(p) = trace {
        let mut w = io::BufWriter::new(create(p)?);
        formats::write_commit_trace(&mut w, &o, TxnId(1))?;
        w.flush()?;
    }
    let summary = CommitSummary {
        decisions: o.decisions.clone(),
        delays: o.delays,
        delays_with_initiation: o.delays_with_initiation,
        messages: o.messages,
        blocked: o.blocked.iter().copied().collect(),
        agreement: o.agreement(),
        validity: o.validity(),
        stable: o.stable(),
    };
    serde_json::to_writer(&mut *out, &summary)?;
    writeln!(out)?;
    Ok(summary.agreement && summary.validity && summary.stable)
}

/// Runs independent configurations on `jobs` threads; results keep input order.
pub fn run_parallel(configs: &[ReplicationConfig], jobs: usize) -> anyhow::Result<Vec<Metrics>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Metrics>>> = Mutex::new(vec![None; configs.len()]);
    let first_error = Mutex::new(None);
    thread::scope(|s| {
        for _ in 0..jobs.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cfg) = configs.get(i) else { break };
                match run_replication(cfg) {
                    Ok(r) => results.lock().expect("no panics while held")[i] = Some(r.metrics),
                    Err(e) => {
                        first_error.lock().expect("no panics while held").get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().expect("threads joined") {
        return Err(e.into());
    }
    Ok(results.into_inner().expect("threads joined").into_iter().map(|m| m.expect("every index ran")).collect())
}
