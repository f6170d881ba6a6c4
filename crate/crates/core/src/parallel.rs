//! Data-parallel map helpers with a sequential fallback.
//!
//! All parallel maps collect into an index-ordered `Vec` and leave reductions
//! to the caller, so results are identical whichever backend runs them.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_slice<'a, T, U, F>(items: &'a [T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&'a T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<'a, T, U, F>(items: &'a [T], f: F) -> Vec<U>
where
    F: Fn(&'a T) -> U,
{
    items.iter().map(f).collect()
}

/// Install a global thread pool with `threads` workers. `threads == 1` gives
/// a bitwise-deterministic single-worker schedule. No-op without the
/// `parallel` feature.
pub fn configure_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        if threads > 0 {
            // ignore the error if a pool already exists (tests, repeat calls)
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}
