//! Deterministic parallel helpers.
//!
//! All helpers split work into a fixed number of chunks that does not depend
//! on the thread count, so results are bitwise identical whether the rayon
//! pool has 1 or N threads.

use rayon::prelude::*;

const FIXED_CHUNKS: usize = 32;

fn chunk_rows(rows: usize) -> usize {
    rows.div_ceil(FIXED_CHUNKS).max(1)
}

/// Run `f(first_row, rows_chunk)` over disjoint row-aligned chunks of `out`.
///
/// `unit` is the number of elements per row; chunk boundaries always fall on
/// row boundaries. Each chunk writes only its own slice.
pub fn for_each_row_chunk<T, F>(out: &mut [T], unit: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(unit > 0 && out.len() % unit == 0);
    let rows = out.len() / unit;
    if rows == 0 {
        return;
    }
    let step = chunk_rows(rows);
    out.par_chunks_mut(step * unit)
        .enumerate()
        .for_each(|(i, chunk)| f(i * step, chunk));
}

/// Map row chunks to partial accumulators of length `acc_len`, then fold the
/// partials in fixed chunk order.
pub fn map_reduce_rows<F>(rows: usize, acc_len: usize, f: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    if rows == 0 {
        return vec![0.0; acc_len];
    }
    let step = chunk_rows(rows);
    let n_chunks = rows.div_ceil(step);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * step;
            let hi = (lo + step).min(rows);
            let mut acc = vec![0.0; acc_len];
            f(lo..hi, &mut acc);
            acc
        })
        .collect();
    let mut total = vec![0.0; acc_len];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += *p;
        }
    }
    total
}
