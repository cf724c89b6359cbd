//! Deterministic fan-out helpers and seed derivation.

use crate::synthdata::identity_seed;

/// `f(i)` for `i in 0..n`, evaluated on up to `workers` scoped threads.
/// Results come back in index order whatever the worker count.
pub fn map_indexed<R, F>(n: usize, workers: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let workers = workers.max(1);
    if workers == 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(workers) {
        let f = &f;
        let part: Vec<R> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|i| s.spawn(move || f(*i))).collect();
            handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
        });
        out.extend(part);
    }
    out
}

/// Child seed of `base` along a path of indices.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(identity_seed(base, 0x5eed), |s, p| identity_seed(s, *p as usize))
}
