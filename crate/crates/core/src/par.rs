//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the per-item work is spread over the rayon
//! pool; without it everything runs on the calling thread. Both paths return
//! results in input order and every reduction in this crate folds those
//! results sequentially, so outputs are bit-identical whatever the thread
//! count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Items per work unit for batch gradient accumulation. Fixed so that the
/// partial-sum grouping does not depend on the number of threads.
pub const CHUNK: usize = 16;

/// Maps `f` over `items`, preserving order.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Maps `f` over consecutive `[start, end)` chunks of `0..n` of size [`CHUNK`].
pub fn map_chunks<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize, usize) -> U + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    map_range(chunks, |c| {
        let start = c * CHUNK;
        f(start, (start + CHUNK).min(n))
    })
}

/// Whether the crate was built with the rayon backend.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
