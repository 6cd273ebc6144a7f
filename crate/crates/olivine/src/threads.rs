//! Worker-thread cap shared by the dense kernels and the CLI.
//!
//! 0 (the default) means serial execution. Parallel paths split work into
//! disjoint output regions, so results are byte-identical for every setting.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Caps worker parallelism. 0 = serial.
pub fn set_threads(n: usize) {
    THREADS.store(n, Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Number of workers to actually spawn for `items` independent work units.
pub(crate) fn effective(items: usize) -> usize {
    threads().min(items).max(1)
}
