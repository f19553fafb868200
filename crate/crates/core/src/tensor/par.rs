//! Data-parallel helpers. With the `parallel` feature these dispatch to rayon,
//! otherwise they run the same closures sequentially. Every helper preserves
//! output order, so results do not depend on the thread count.

/// Below this many elements elementwise maps stay on the calling thread.
pub const PAR_THRESHOLD: usize = 1 << 15;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `f(i)` for `i in 0..n` and collects the results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Calls `f(chunk_index, chunk)` on consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        if data.len() > chunk {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Elementwise map, split into parallel blocks for large inputs.
pub fn map<T, F>(src: &[T], f: F) -> Vec<T>
where
    T: Copy + Send + Sync + Default,
    F: Fn(T) -> T + Sync + Send,
{
    let mut out = vec![T::default(); src.len()];
    if src.len() < PAR_THRESHOLD {
        for (o, &s) in out.iter_mut().zip(src) {
            *o = f(s);
        }
        return out;
    }
    let block = PAR_THRESHOLD / 4;
    for_each_chunk_mut(&mut out, block, |bi, chunk| {
        let base = bi * block;
        for (k, o) in chunk.iter_mut().enumerate() {
            *o = f(src[base + k]);
        }
    });
    out
}

/// Elementwise zip of two equally sized slices.
pub fn zip<T, F>(a: &[T], b: &[T], f: F) -> Vec<T>
where
    T: Copy + Send + Sync + Default,
    F: Fn(T, T) -> T + Sync + Send,
{
    debug_assert_eq!(a.len(), b.len());
    let mut out = vec![T::default(); a.len()];
    if a.len() < PAR_THRESHOLD {
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
            *o = f(x, y);
        }
        return out;
    }
    let block = PAR_THRESHOLD / 4;
    for_each_chunk_mut(&mut out, block, |bi, chunk| {
        let base = bi * block;
        for (k, o) in chunk.iter_mut().enumerate() {
            *o = f(a[base + k], b[base + k]);
        }
    });
    out
}
