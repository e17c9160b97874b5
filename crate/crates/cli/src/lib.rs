//! Command implementations behind the `steallab` binary.
//!
//! Every command validates its configuration, writes a `manifest.json` into
//! its output directory and only then starts work.

pub mod config;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::{config_error, resolve, ConfigError, Overrides, RunConfig};
pub use run::{attack, rerun, train_victim, RunManifest};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const NON_FINITE: i32 = 3;
}

/// Maps an error chain to the exit code the binary reports.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return exit::USAGE;
        }
        match cause.downcast_ref::<steallab::Error>() {
            Some(steallab::Error::NonFinite { .. }) => return exit::NON_FINITE,
            Some(steallab::Error::InvalidConfig { .. }) => return exit::USAGE,
            _ => {}
        }
    }
    exit::FAILURE
}
