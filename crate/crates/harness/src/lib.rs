//! Command-line harness: configuration, experiment commands and result files.

// Validation writes `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod output;

use asyncflow::Error;

/// Process exit status for an error: 2 for usage and configuration
/// problems, 3 for numeric failures, 4 for I/O and malformed files.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Config(_) | Error::Shape(_) | Error::Domain(_) | Error::Usage(_) | Error::Version(_) => 2,
        Error::Numeric(_) => 3,
        Error::Io(_) | Error::Format(_) | Error::Json(_) | Error::Csv(_) => 4,
        Error::AtStep { .. } => unreachable!("root() unwraps step context"),
    }
}
