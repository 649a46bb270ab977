//! File formats, command-line front end and parallel sweeps for `txlab-core`.

pub mod cli;
pub mod formats;
