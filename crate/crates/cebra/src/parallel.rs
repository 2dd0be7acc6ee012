//! Fixed-order fan-out of independent runs over scoped threads.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "CEBRA_ENGINE_THREADS";

/// Threads to use for `requested` jobs (0 means one per core), capped by
/// `CEBRA_ENGINE_THREADS` when that is set.
pub fn worker_count(requested: usize) -> Result<usize> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut n = if requested == 0 { cores } else { requested };
    if let Ok(cap) = std::env::var(THREADS_ENV) {
        let cap: usize = cap
            .trim()
            .parse()
            .ok()
            .filter(|&c| c > 0)
            .ok_or_else(|| Error::Validation(format!("{THREADS_ENV} must be a positive integer, got `{cap}`")))?;
        n = n.min(cap);
    }
    Ok(n.max(1))
}

/// `f(0), .., f(count - 1)` on up to `jobs` threads, returned in index order.
pub fn map_indexed<T, F>(count: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if jobs <= 1 || count <= 1 {
        return (0..count).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(count) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let value = f(i);
                slots.lock().expect("no worker panicked")[i] = Some(value);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|v| v.expect("every index ran"))
        .collect()
}
