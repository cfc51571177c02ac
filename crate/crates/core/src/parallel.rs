//! Deterministic chunked reductions over voxel index ranges.
//!
//! Work is split into fixed-size chunks independent of the worker count and the
//! partial results are merged in chunk order, so sums are bit-identical whether
//! the pool has one thread or many.

use rayon::prelude::*;

use crate::error::Result;

pub(crate) const CHUNK: usize = 2048;

pub(crate) fn try_reduce<A, I, F, M>(n: usize, init: I, fold: F, merge: M) -> Result<A>
where
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) -> Result<()> + Sync,
    M: Fn(&mut A, A),
{
    let n_chunks = n.div_ceil(CHUNK);
    let parts: Vec<A> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                fold(&mut acc, i)?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<A>>>()?;
    let mut acc = init();
    for p in parts {
        merge(&mut acc, p);
    }
    Ok(acc)
}

/// Ordered sum of `f(i)` over `0..n`.
pub(crate) fn try_sum<F>(n: usize, f: F) -> Result<f64>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    try_reduce(
        n,
        || 0.0,
        |acc, i| {
            *acc += f(i)?;
            Ok(())
        },
        |acc, p| *acc += p,
    )
}

/// Fills `out` chunk by chunk, `width` values per item.
pub(crate) fn try_fill<F>(out: &mut [f64], width: usize, f: F) -> Result<()>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    if width == 0 {
        return Ok(());
    }
    out.par_chunks_mut(CHUNK * width)
        .enumerate()
        .try_for_each(|(c, block)| {
            for (j, item) in block.chunks_mut(width).enumerate() {
                f(c * CHUNK + j, item)?;
            }
            Ok(())
        })
}
