//! Thin execution layer over rayon. With the `parallel` feature disabled every
//! helper degrades to the equivalent sequential iterator, so kernels are
//! written once against these functions.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Calls `f(index, chunk)` for each `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk_mut`] but walks two equally chunked buffers in lockstep.
pub fn for_each_chunk_pair_mut<A, B, F>(a: &mut [A], a_len: usize, b: &mut [B], b_len: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(a_len)
        .zip(b.par_chunks_mut(b_len))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(a_len)
        .zip(b.chunks_mut(b_len))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

/// Three-buffer variant of [`for_each_chunk_pair_mut`].
pub fn for_each_chunk_triple_mut<A, B, C, F>(
    a: &mut [A],
    a_len: usize,
    b: &mut [B],
    b_len: usize,
    c: &mut [C],
    c_len: usize,
    f: F,
) where
    A: Send,
    B: Send,
    C: Send,
    F: Fn(usize, &mut [A], &mut [B], &mut [C]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(a_len)
        .zip(b.par_chunks_mut(b_len))
        .zip(c.par_chunks_mut(c_len))
        .enumerate()
        .for_each(|(i, ((x, y), z))| f(i, x, y, z));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(a_len)
        .zip(b.chunks_mut(b_len))
        .zip(c.chunks_mut(c_len))
        .enumerate()
        .for_each(|(i, ((x, y), z))| f(i, x, y, z));
}

/// Sums `f(i)` over `0..n`. Integer sums are order independent, so the result
/// is deterministic for any worker count.
pub fn sum_u64<F>(n: usize, f: F) -> u64
where
    F: Fn(usize) -> u64 + Send + Sync,
{
    #[cfg(feature = "parallel")]
    return (0..n).into_par_iter().map(f).sum();
    #[cfg(not(feature = "parallel"))]
    (0..n).map(f).sum()
}

/// Runs `f(i)` for every `i` in `0..n`.
pub fn for_each_index<F>(n: usize, f: F)
where
    F: Fn(usize) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    (0..n).into_par_iter().for_each(f);
    #[cfg(not(feature = "parallel"))]
    (0..n).for_each(f);
}

/// Number of workers the parallel helpers will use.
pub fn worker_count() -> usize {
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();
    #[cfg(not(feature = "parallel"))]
    1
}

/// Calls `f` on every element of `items`.
pub fn for_each_item_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(&mut T) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    items.par_iter_mut().for_each(f);
    #[cfg(not(feature = "parallel"))]
    items.iter_mut().for_each(f);
}

/// Maps `0..n` through `f` and collects in index order.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    return (0..n).into_par_iter().map(f).collect();
    #[cfg(not(feature = "parallel"))]
    (0..n).map(f).collect()
}
