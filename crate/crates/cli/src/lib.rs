//! Run configuration and pipeline commands behind the `seqmatch` binary.

pub mod commands;
pub mod config;

use seqmatch_core::tensor::TensorError;

use commands::MissingInput;
use config::ConfigError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_INPUT: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// Exit status and error kind for a failed command.
pub fn classify(err: &anyhow::Error) -> (i32, &'static str) {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return (EXIT_CONFIG, "config");
        }
        if cause.is::<MissingInput>() {
            return (EXIT_MISSING_INPUT, "missing-input");
        }
        match cause.downcast_ref::<seqmatch_core::Error>() {
            Some(seqmatch_core::Error::Divergence { .. })
            | Some(seqmatch_core::Error::Tensor(TensorError::NonFinite(_))) => {
                return (EXIT_DIVERGENCE, "divergence")
            }
            _ => {}
        }
        if let Some(TensorError::NonFinite(_)) = cause.downcast_ref::<TensorError>() {
            return (EXIT_DIVERGENCE, "divergence");
        }
    }
    (EXIT_FAILURE, "error")
}
