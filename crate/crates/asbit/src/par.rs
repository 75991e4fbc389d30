//! Data-parallel facade.
//!
//! With the default `parallel` feature the helpers fan work out over rayon;
//! without it they run sequentially with identical results. All callers
//! produce output indexed by input position, so the schedule never affects
//! the result.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map over items, preserving order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Map over items, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Map over the index range `0..n`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Map over the index range `0..n`, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Visit disjoint output chunks of `buf` of length `chunk` in parallel.
/// Chunk boundaries are fixed by `chunk`, so the split is schedule-free.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(buf: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    buf.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Visit disjoint output chunks of `buf` of length `chunk`.
#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(buf: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Run `f` on a dedicated pool of `threads` workers (0 = all cores).
/// Without the `parallel` feature the closure just runs on this thread.
#[cfg(feature = "parallel")]
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("failed to build worker pool");
    pool.install(f)
}

/// Run `f` on this thread (sequential build).
#[cfg(not(feature = "parallel"))]
pub fn with_threads<R>(_threads: usize, f: impl FnOnce() -> R) -> R {
    f()
}
