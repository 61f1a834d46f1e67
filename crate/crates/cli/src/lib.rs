//! Library side of the `unrec` binary: configuration parsing and the
//! command implementations, exposed for integration tests.

pub mod commands;
pub mod config;

use unrec::Error;

/// Process exit code for an error: 2 config, 3 data, 4 numeric.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}
