//! Parallel execution switch.
//!
//! All data-parallel loops in the crate run through [`for_each_chunk_mut`] so
//! that every output element is written by exactly one task. Results are
//! therefore bit-identical whether the work runs on the rayon pool or on the
//! current thread, which keeps training trajectories and checkpoints
//! reproducible. The `parallel` feature removes the rayon dependency entirely;
//! with the feature enabled, [`set_parallel`] provides a runtime toggle used by
//! the benchmark suite to compare both execution modes in one process.

#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Returns true when work may be dispatched to the rayon pool.
pub fn parallel_enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        PARALLEL.load(Ordering::Relaxed)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Runtime toggle for the parallel path. No-op without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    #[cfg(feature = "parallel")]
    PARALLEL.store(enabled, Ordering::Relaxed);
    #[cfg(not(feature = "parallel"))]
    let _ = enabled;
}

/// Worker threads available to data-parallel loops (1 when disabled).
pub fn num_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            return rayon::current_num_threads();
        }
    }
    1
}

/// Below this many elements a loop is not worth dispatching.
const MIN_PAR_LEN: usize = 16 * 1024;

/// Splits `out` into chunks of `chunk_len` elements and calls
/// `f(chunk_index, chunk)` for each, in parallel when enabled.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && out.len() >= MIN_PAR_LEN && out.len() > chunk_len {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in out.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Runs `f(i)` for `i` in `0..n`, in parallel when enabled. `f` must only
/// touch state disjoint per index.
pub fn for_each_index<F>(n: usize, min_serial: usize, f: F)
where
    F: Fn(usize) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && n > 1 && n >= min_serial {
            use rayon::prelude::*;
            (0..n).into_par_iter().for_each(f);
            return;
        }
    }
    let _ = min_serial;
    for i in 0..n {
        f(i);
    }
}
