//! Library side of the `bnnps` binary: config files, run directories, the
//! experiment pipeline and the subcommands.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod run;

use bnnps_core::Error as CoreError;

pub use commands::{execute, Cli};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const IO: i32 = 4;
    pub const DATA: i32 = 5;
    pub const DIVERGED: i32 = 6;
}

/// Category name and exit code of an error, from the first recognised cause.
pub fn classify(err: &anyhow::Error) -> (&'static str, i32) {
    for cause in err.chain() {
        if cause.downcast_ref::<config::ConfigError>().is_some() {
            return ("config", exit::CONFIG);
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Io(_) => ("io", exit::IO),
                CoreError::Format(_) | CoreError::Domain(_) => ("data", exit::DATA),
                CoreError::Diverged { .. } => ("diverged", exit::DIVERGED),
                CoreError::InvalidArgument(_) => ("config", exit::CONFIG),
                _ => ("internal", exit::OTHER),
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", exit::IO);
        }
        if let Some(e) = cause.downcast_ref::<csv::Error>() {
            return if e.is_io_error() { ("io", exit::IO) } else { ("data", exit::DATA) };
        }
    }
    ("error", exit::OTHER)
}
