//! Kernel parallelism switch.
//!
//! Kernels split work into independent items (output channels, patch
//! rows) whose results are assembled in item order, so output is bitwise
//! identical for any thread count.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Sets the kernel thread cap. `0` runs every kernel serially.
pub fn set_threads(n: usize) {
    THREADS.store(n, Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Reads `SQUANT_THREADS`; unset or unparsable means serial.
pub fn threads_from_env() -> usize {
    std::env::var("SQUANT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

pub(crate) fn map_items<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if threads() == 0 || n < 2 {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}
