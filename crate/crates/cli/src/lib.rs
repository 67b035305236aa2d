//! Configuration, pipeline stages and exit-code policy for the
//! `contraction-gp` command-line tool.

pub mod config;
pub mod pipeline;

use contraction_gp::Error;

/// Exit status when synthesis is infeasible or a certificate fails.
pub const EXIT_NOT_CERTIFIED: i32 = 2;
/// Exit status for bad input, configuration or I/O.
pub const EXIT_INPUT: i32 = 3;
/// Exit status for numerical failures.
pub const EXIT_NUMERICAL: i32 = 4;

/// Maps an error chain to a process exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Infeasible(_)) => EXIT_NOT_CERTIFIED,
        Some(Error::Factorization { .. } | Error::Numerical(_) | Error::Unbounded(_)) => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}
