//! Command-line front end: configuration parsing and subcommand dispatch.

pub mod commands;
pub mod config;

pub use commands::{execute, Command};
pub use config::{parse_config, parse_override, parse_str, RunConfig};

/// Process exit status for an error.
pub fn exit_code(err: &ismrnn::Error) -> i32 {
    match err.kind() {
        ismrnn::ErrorKind::Config => 2,
        ismrnn::ErrorKind::Data => 3,
        ismrnn::ErrorKind::Numeric => 4,
        ismrnn::ErrorKind::Other => 1,
    }
}
