//! Data-parallel loop helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these run on the rayon pool unless
//! sequential execution is forced at runtime via [`set_sequential`] (the
//! strict-determinism mode). Kernels built on these helpers only ever combine
//! per-index partial results in index order, so parallel and sequential
//! execution produce bitwise-identical outputs; strict mode simply removes
//! the thread pool from the picture entirely.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force all helpers onto the sequential path (strict-determinism mode).
pub fn set_sequential(force: bool) {
    FORCE_SEQUENTIAL.store(force, Ordering::Relaxed);
}

/// True when sequential execution has been forced at runtime.
pub fn sequential_forced() -> bool {
    FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// True when the next helper call will use the rayon pool.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !sequential_forced()
}

/// Apply `f` to disjoint consecutive chunks of `data`, `chunk` elements each.
/// The chunk index is passed alongside the slice.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Map `0..n` through `f`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
