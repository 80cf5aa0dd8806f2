//! Indexed parallel map with a sequential fallback.
//!
//! Heavy inner loops (per-question batches, trace enumeration, probe trials)
//! map an index range to partial results and fold the returned vector in index
//! order. Because the collection preserves order and the fold is sequential,
//! results are bitwise independent of thread count. With the `parallel`
//! feature disabled the same entry point runs on the calling thread.

/// Maps `0..n` to results, in parallel when the `parallel` feature is on.
/// The output vector is in index order either way.
#[cfg(feature = "parallel")]
pub fn map_indexed<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `0..n` to results on the calling thread (`parallel` feature off).
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    map_indexed_seq(n, f)
}

/// Always-sequential variant with the same contract, kept public so the bench
/// suite can compare both paths in one build.
pub fn map_indexed_seq<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    (0..n).map(f).collect()
}
