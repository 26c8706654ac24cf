//! Deterministic parallel reductions.
//!
//! Work is split into a fixed number of index chunks; chunk partials are
//! combined sequentially in chunk order, so results do not depend on the
//! thread count or scheduling. This is the documented reduction order for
//! every parallel accumulation in the crate.

use rayon::prelude::*;
use std::ops::Range;

/// Fixed chunk count for deterministic reductions.
pub const REDUCTION_CHUNKS: usize = 64;

pub fn chunk_ranges(n: usize, chunks: usize) -> Vec<Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let chunks = chunks.clamp(1, n);
    let base = n / chunks;
    let extra = n % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut start = 0;
    for c in 0..chunks {
        let len = base + usize::from(c < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Parallel fold over `0..n` with a deterministic sequential combine.
pub fn par_reduce<A, I, F, C>(n: usize, init: I, fold: F, mut combine: C) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) + Sync,
    C: FnMut(&mut A, A),
{
    let partials: Vec<A> = chunk_ranges(n, REDUCTION_CHUNKS)
        .into_par_iter()
        .map(|range| {
            let mut acc = init();
            for i in range {
                fold(&mut acc, i);
            }
            acc
        })
        .collect();
    let mut iter = partials.into_iter();
    let mut total = iter.next().unwrap_or_else(&init);
    for p in iter {
        combine(&mut total, p);
    }
    total
}

/// Fallible parallel fold; the first error (in chunk order) wins.
pub fn try_par_reduce<A, E, I, F, C>(n: usize, init: I, fold: F, mut combine: C) -> Result<A, E>
where
    A: Send,
    E: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) -> Result<(), E> + Sync,
    C: FnMut(&mut A, A),
{
    let partials: Vec<Result<A, E>> = chunk_ranges(n, REDUCTION_CHUNKS)
        .into_par_iter()
        .map(|range| {
            let mut acc = init();
            for i in range {
                fold(&mut acc, i)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total: Option<A> = None;
    for p in partials {
        let p = p?;
        match &mut total {
            None => total = Some(p),
            Some(t) => combine(t, p),
        }
    }
    Ok(total.unwrap_or_else(init))
}
