//! Thread-pool sizing for the compute kernels.
//!
//! Kernels split work into fixed-size chunks that do not depend on the number
//! of threads, so results are bit-identical for any pool size.

use once_cell::sync::OnceCell;

/// Environment variable capping kernel parallelism.
pub const THREADS_ENV: &str = "MOBILEX_THREADS";

static INIT: OnceCell<usize> = OnceCell::new();

/// Configures the global pool from `MOBILEX_THREADS` (if set). Returns the
/// number of worker threads in effect. Safe to call more than once.
pub fn init_from_env() -> usize {
    init_from_env_or(None)
}

/// Like [`init_from_env`], falling back to `default` threads when the
/// variable is unset.
pub fn init_from_env_or(default: Option<usize>) -> usize {
    *INIT.get_or_init(|| {
        let requested = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .or(default.filter(|&n| n > 0));
        if let Some(n) = requested {
            // Fails only if the pool already exists; the existing pool wins.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        rayon::current_num_threads()
    })
}

pub fn current_threads() -> usize {
    rayon::current_num_threads()
}
