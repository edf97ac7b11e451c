//! Sample-level parallelism. Without `std` everything runs sequentially;
//! with it, rayon distributes independent chunks. Callers never reduce
//! across chunks inside these helpers, so results do not depend on the
//! thread count.

use alloc::vec::Vec;

#[cfg(feature = "std")]
use rayon::prelude::*;

pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "std")]
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "std"))]
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

pub(crate) fn map_range<R, F>(count: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "std")]
    return (0..count).into_par_iter().map(f).collect();
    #[cfg(not(feature = "std"))]
    return (0..count).map(f).collect();
}
