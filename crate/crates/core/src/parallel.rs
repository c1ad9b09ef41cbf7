//! Data-parallel dispatch for the kernels.
//!
//! With the `parallel` feature the kernels fan out over independent output
//! slices with rayon; without it (or with the runtime switch off) the same
//! closures run in a plain loop. Work is only ever split across outputs that
//! do not share an accumulator, so results are bit-identical either way.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Turns data parallelism on or off at runtime. Has no effect when the crate
/// is built without the `parallel` feature.
pub fn set_enabled(on: bool) {
    ENABLED.store(on && cfg!(feature = "parallel"), Ordering::SeqCst);
}

/// True when kernels will actually spread work over more than one thread.
pub fn is_active() -> bool {
    ENABLED.load(Ordering::SeqCst) && thread_count() > 1
}

/// Whether the runtime switch is on, regardless of the pool size.
pub fn is_enabled() -> bool {
    ENABLED.load(Ordering::SeqCst)
}

pub fn thread_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Sizes the global pool. Only the first call can succeed; later calls leave
/// the pool as is. A count of 1 also switches parallel dispatch off.
pub fn configure_threads(threads: usize) {
    if threads <= 1 {
        set_enabled(false);
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

/// Runs `f(index, chunk)` over consecutive `chunk_len`-sized pieces of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Maps `0..n` through `f`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if is_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
