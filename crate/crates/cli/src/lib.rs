//! Library half of the `hyperprompt` command: configuration handling and
//! the subcommands, usable from tests without spawning a process.

pub mod commands;
pub mod run_config;

pub use run_config::{RunConfig, SweepAxis};

use hyperprompt_core::Error;

/// Process exit code for an error: 2 validation, 3 numeric abort, 4 I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => 3,
        Error::Io { .. } | Error::Csv(_) => 4,
        Error::Config(_)
        | Error::Dimension(_)
        | Error::Index(_)
        | Error::Load(_)
        | Error::Json(_) => 2,
    }
}
