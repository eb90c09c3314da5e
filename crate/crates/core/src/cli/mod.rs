//! Configuration, file formats and the pipeline behind the `srcid` binary.

pub mod commands;
pub mod config;
pub mod io;

pub use commands::{
    cmd_generate, cmd_metrics, cmd_relax, cmd_run, cmd_shape, measurements, metrics, MetricsReport, RunRecord,
};
pub use config::{ProblemConfig, OUTPUT_DIR_ENV};

use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_CONVERGED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Process exit code for an error escaping a command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::NotConverged { .. } | Error::Singular(_) | Error::DegenerateControl(_) => EXIT_NOT_CONVERGED,
    }
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker thread(s): {e}")))?;
    Ok(pool.install(f))
}
