//! Worker-pool sizing. `CAP_THREADS` caps internal parallelism; the default
//! is the logical core count.

use std::sync::Once;

static INIT: Once = Once::new();

/// Configure the global worker pool from `CAP_THREADS`. Safe to call more
/// than once; only the first call takes effect. Library entry points that
/// use parallelism call this lazily.
pub fn init() {
    INIT.call_once(|| {
        if let Some(n) = thread_cap() {
            // Ignore failure: the pool may already be running (e.g. under a
            // test harness), in which case the default sizing stands.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    });
}

fn thread_cap() -> Option<usize> {
    let raw = std::env::var("CAP_THREADS").ok()?;
    raw.trim().parse::<usize>().ok().filter(|&n| n > 0)
}
