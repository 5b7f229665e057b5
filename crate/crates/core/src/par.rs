//! Row-partitioned data parallelism.
//!
//! Every helper here splits work by *output* rows: each output element is
//! written by exactly one closure invocation and computed in a fixed order,
//! so results are bit-identical with or without the `parallel` feature and
//! for any thread count. Reductions never cross a row boundary.

/// Below this many scalar operations the rayon dispatch costs more than it saves.
pub const MIN_PARALLEL_WORK: usize = 1 << 14;

/// Calls `f(row_index, row)` for every `row_len`-sized chunk of `out`.
///
/// `work_per_row` is a rough cost estimate used only to decide whether to
/// fan out; it never affects the result.
pub fn for_each_row<F>(out: &mut [f64], row_len: usize, work_per_row: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    let rows = out.len() / row_len;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if rows > 1 && rows.saturating_mul(work_per_row.max(row_len)) >= MIN_PARALLEL_WORK {
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = (rows, work_per_row);
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Maps `0..n` to a vector, in parallel when the feature is enabled.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_visited_once_with_their_index() {
        let mut out = vec![0.0; 4 * 10_000];
        for_each_row(&mut out, 4, 1000, |i, row| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (i * 4 + j) as f64;
            }
        });
        assert!(out.iter().enumerate().all(|(k, &v)| v == k as f64));
    }

    #[test]
    fn map_indices_preserves_order() {
        let v = map_indices(1000, |i| i * 2);
        assert_eq!(v, (0..1000).map(|i| i * 2).collect::<Vec<_>>());
    }
}
