//! Kernel thread-count configuration.
//!
//! All parallel kernels partition their output into a fixed number of
//! disjoint blocks derived from this value, never from runtime load, so a
//! given thread setting always produces the same floating-point results.

use std::sync::OnceLock;

/// Environment variable that caps kernel parallelism. `1` forces fully
/// sequential execution.
pub const THREADS_ENV: &str = "IMM_GPT_THREADS";

/// Number of threads kernels may use. Read once per process: the env var if
/// set to a positive integer, otherwise the machine's available parallelism.
/// Also sizes the global worker pool on first call.
pub fn kernel_threads() -> usize {
    static N: OnceLock<usize> = OnceLock::new();
    *N.get_or_init(|| {
        let n = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            });
        // Best effort: a pool may already exist (e.g. in tests), which is fine
        // because correctness never depends on pool size, only block count.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        n
    })
}
