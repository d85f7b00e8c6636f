//! Operator surface for the training, decoding, dedup, and evaluation
//! pipeline. The binary in `main.rs` parses arguments and maps errors to
//! exit codes; everything else lives here so tests can run commands
//! in-process.

pub mod commands;
pub mod config;
pub mod imgfmt;
pub mod jsonl;
pub mod synth;

use echo_moe::error::Error;

/// Exit code policy: 0 success, 1 violated invariant (including aborted
/// training), 2 usage or data errors.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Train(_) => 1,
        Error::Dimension(_)
        | Error::Config(_)
        | Error::Data(_)
        | Error::Contract(_)
        | Error::Io(_) => 2,
    }
}
