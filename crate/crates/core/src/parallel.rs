//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the per-channel loops of the convolution
//! kernels are spread over the rayon pool; without it (or inside a
//! one-thread pool) they run in order on the calling thread. Each chunk is
//! computed by exactly one closure call, so results are bit-identical
//! whatever the thread count.

/// Environment variable that sets the worker count when `--threads` is absent.
pub const THREADS_ENV: &str = "FLOWSPIKE_THREADS";

/// Runs `f(index, chunk)` over consecutive `chunk_len` pieces of `buf`.
pub fn for_each_chunk<F>(buf: &mut [f32], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Send + Sync,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        buf.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        buf.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Sequential twin of [`for_each_chunk`], kept public for benchmarks.
pub fn for_each_chunk_seq<F>(buf: &mut [f32], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]),
{
    if chunk_len == 0 {
        return;
    }
    buf.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Number of worker threads currently available to [`for_each_chunk`].
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Runs `f` with the data-parallel kernels limited to `threads` workers.
///
/// `threads == 1` gives the deterministic single-core mode used for
/// latency profiling.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

/// Resolves the worker count: explicit value, then `FLOWSPIKE_THREADS`,
/// then `None` (library default).
pub fn resolve_threads(explicit: Option<usize>) -> Option<usize> {
    explicit.or_else(|| {
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
    })
}

/// Configures the global pool once at startup. Later calls are ignored.
pub fn init_global(threads: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}
