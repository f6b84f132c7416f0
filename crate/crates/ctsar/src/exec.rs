//! Execution-mode dispatch for the data-parallel kernels.
//!
//! Every hot loop in this crate parallelizes only over disjoint output
//! regions and keeps a fixed accumulation order inside each region, so the
//! parallel and sequential paths produce bit-identical results. The
//! `parallel` feature selects whether rayon is compiled in at all;
//! [`set_sequential`] switches to the sequential path at runtime
//! (deterministic mode is specified as single-threaded end to end).

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential code path at runtime (used by deterministic mode
/// and by the benchmarks that compare both paths).
pub fn set_sequential(seq: bool) {
    FORCE_SEQUENTIAL.store(seq, Ordering::Relaxed);
}

/// True when rayon is compiled in and not overridden at runtime.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Run `body(start_index, chunk)` over `out` split into `chunk_len`-sized
/// pieces, in parallel when enabled. `start_index` is the chunk index.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk_len: usize, body: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| body(i, chunk));
        return;
    }
    for (i, chunk) in out.chunks_mut(chunk_len).enumerate() {
        body(i, chunk);
    }
}

/// Run `body(i)` for `i` in `0..n`, in parallel when enabled. The bodies
/// must touch disjoint state.
pub fn for_each_index<F>(n: usize, body: F)
where
    F: Fn(usize) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        (0..n).into_par_iter().for_each(body);
        return;
    }
    for i in 0..n {
        body(i);
    }
}

/// Like [`for_each_chunk_mut`] but over two slices chunked in lockstep
/// (e.g. a pooled output plane and its argmax plane).
pub fn for_each_chunk_pair_mut<A, B, F>(
    a: &mut [A],
    chunk_a: usize,
    b: &mut [B],
    chunk_b: usize,
    body: F,
) where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Send + Sync,
{
    debug_assert_eq!(a.len() / chunk_a, b.len() / chunk_b);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        a.par_chunks_mut(chunk_a)
            .zip(b.par_chunks_mut(chunk_b))
            .enumerate()
            .for_each(|(i, (ca, cb))| body(i, ca, cb));
        return;
    }
    for (i, (ca, cb)) in a.chunks_mut(chunk_a).zip(b.chunks_mut(chunk_b)).enumerate() {
        body(i, ca, cb);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_dispatch_matches_sequential() {
        let mut a = vec![0u64; 64];
        let mut b = vec![0u64; 64];
        for_each_chunk_mut(&mut a, 8, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 100 + j) as u64;
            }
        });
        set_sequential(true);
        for_each_chunk_mut(&mut b, 8, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 100 + j) as u64;
            }
        });
        set_sequential(false);
        assert_eq!(a, b);
    }
}
