//! Worker pool sizing.

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "CLUST3_THREADS";

/// Worker count: `CLUST3_THREADS` if set to a positive integer, otherwise
/// the number of available cores.
pub fn worker_count() -> Result<usize> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(cores),
    }
}

pub fn pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count()?)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}
