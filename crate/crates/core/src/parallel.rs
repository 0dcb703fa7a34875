//! Data-parallel helpers with a sequential fallback.
//!
//! Built with the `parallel` feature (default), the helpers fan work out over
//! rayon; without it they degrade to plain loops and rayon is not compiled at
//! all. Every call site partitions its output into disjoint chunks and each
//! chunk is filled by a fixed-order accumulation, so results are bitwise
//! identical regardless of thread count.
//!
//! [`force_sequential`] is a runtime override used by the benchmark suite to
//! compare both execution modes within one binary.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force all helpers in this module onto the sequential path at runtime.
pub fn force_sequential(force: bool) {
    FORCE_SEQUENTIAL.store(force, Ordering::SeqCst);
}

/// True when work will actually be distributed over rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Split `out` into contiguous chunks of `chunk_len` and fill each one.
/// The closure receives the chunk index and the chunk slice.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0 && out.len() % chunk_len == 0);
    #[cfg(feature = "parallel")]
    if is_parallel() {
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in out.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Map `0..n` to a vector, preserving index order in the output.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_fill_matches_sequential() {
        let mut a = vec![0u64; 64];
        let mut b = vec![0u64; 64];
        let fill = |i: usize, c: &mut [u64]| {
            for (k, v) in c.iter_mut().enumerate() {
                *v = (i * 31 + k) as u64;
            }
        };
        for_each_chunk_mut(&mut a, 8, fill);
        force_sequential(true);
        for_each_chunk_mut(&mut b, 8, fill);
        force_sequential(false);
        assert_eq!(a, b);
    }

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
    }
}
