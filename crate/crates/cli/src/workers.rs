//! Worker-pool control.

use crate::error::{CliError, Result};

pub const DETERMINISTIC_ENV: &str = "BST_DETERMINISTIC";

pub fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

/// Worker count after applying `BST_DETERMINISTIC=1`, which forces one.
pub fn resolve_workers(requested: Option<usize>) -> usize {
    if deterministic() {
        1
    } else {
        requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1)
    }
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}
