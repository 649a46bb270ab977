//! Deterministic transaction-processing kernel.
//!
//! Everything in this crate is a passive state machine driven by an explicit
//! scheduler, so runs are reproducible from a seed. The crate is `no_std` and
//! only needs `alloc`; file formats, the CLI and parallel sweeps live in the
//! companion `txlab` crate.
//!
//! Layout:
//!
//! - [`store`]: versioned entity store with redo log, checkpoints, crash and restart.
//! - [`lock`]: multigranularity lock table, predicate locks, degrees of consistency,
//!   deadlock detection.
//! - [`mvcc`]: multiversion store with snapshot isolation.
//! - [`history`]: execution histories, serializability and anomaly oracles.
//! - [`engine`] and [`workload`]: schedulers that drive the above and record histories.
//! - [`sim`] and [`commit`]: simulated network and atomic commitment protocols.
//! - [`replication`]: replicated-database strategies and scaling measurements.
//! - [`saga`]: sagas, compensation and commit dependencies.
//! - [`scenario`]: the registry of named, self-checking scenarios.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod commit;
pub mod engine;
pub mod history;
pub mod lock;
pub mod mvcc;
pub mod replication;
pub mod saga;
pub mod scenario;
pub mod sim;
pub mod store;
pub mod types;
pub mod workload;

pub use types::{Key, TxnId, Value};
