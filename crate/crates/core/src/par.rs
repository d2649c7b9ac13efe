//! Row-chunked reductions whose result does not depend on the thread count.
//!
//! Rows are cut into fixed-size chunks, each chunk is reduced sequentially,
//! and chunk partials are combined pairwise in chunk order.

use std::ops::Range;

use rayon::prelude::*;

pub(crate) const ROW_CHUNK: usize = 1024;

fn chunks(n: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(ROW_CHUNK))
        .map(|c| c * ROW_CHUNK..((c + 1) * ROW_CHUNK).min(n))
        .collect()
}

/// Sums a `width`-long accumulator over all rows. `f` adds the contribution
/// of the given row range into the zeroed buffer it receives.
pub(crate) fn sum_rows<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(Range<usize>, &mut [f64]) + Sync,
{
    let ranges = chunks(n);
    if ranges.len() <= 1 {
        let mut acc = vec![0.0; width];
        if let Some(r) = ranges.into_iter().next() {
            f(r, &mut acc);
        }
        return acc;
    }
    let partials: Vec<Vec<f64>> = ranges
        .into_par_iter()
        .map(|r| {
            let mut acc = vec![0.0; width];
            f(r, &mut acc);
            acc
        })
        .collect();
    combine(partials, width)
}

fn combine(mut parts: Vec<Vec<f64>>, width: usize) -> Vec<f64> {
    if parts.is_empty() {
        return vec![0.0; width];
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap()
}

/// Fills `out[i]` for every row in parallel chunks.
pub(crate) fn fill_rows<F>(out: &mut [f64], f: F)
where
    F: Fn(usize) -> f64 + Sync,
{
    if out.len() <= ROW_CHUNK {
        for (i, o) in out.iter_mut().enumerate() {
            *o = f(i);
        }
        return;
    }
    out.par_chunks_mut(ROW_CHUNK)
        .enumerate()
        .for_each(|(c, chunk)| {
            let base = c * ROW_CHUNK;
            for (k, o) in chunk.iter_mut().enumerate() {
                *o = f(base + k);
            }
        });
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
