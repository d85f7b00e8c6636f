//! Data-parallel helpers, gated behind the `parallel` feature.
//!
//! Every helper here is value-deterministic: work is split so that each
//! output element is produced by exactly one task whose internal evaluation
//! order does not depend on the thread count. Disabling the feature swaps in
//! straight sequential loops with identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this element count the fork/join overhead outweighs the work, so
/// the parallel path falls through to the sequential loop.
#[cfg(feature = "parallel")]
const PAR_MIN_ELEMS: usize = 16 * 1024;

/// Apply `f` to each row of `out` (rows of width `width`), passing the row
/// index. Rows are independent, so results are bitwise identical whether or
/// not the work is parallelized.
pub fn for_each_row<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(width > 0 && out.len() % width == 0);
    #[cfg(feature = "parallel")]
    if out.len() >= PAR_MIN_ELEMS {
        out.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
        return;
    }
    out.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
}

/// Map `f` over a slice, preserving input order in the output.
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(&f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(|x| f(x)).collect()
    }
}

/// Index of the first item satisfying `pred`, scanning a virtual range
/// `0..n`. The parallel path reduces with `min`, so the answer matches the
/// sequential scan exactly.
pub fn find_first_index<F>(n: usize, pred: F) -> Option<usize>
where
    F: Fn(usize) -> bool + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().filter(|&i| pred(i)).min()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).find(|&i| pred(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_filled_in_order() {
        let mut out = vec![0.0; 12];
        for_each_row(&mut out, 3, |i, row| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (i * 3 + j) as f64;
            }
        });
        let want: Vec<f64> = (0..12).map(|x| x as f64).collect();
        assert_eq!(out, want);
    }

    #[test]
    fn find_first_matches_sequential() {
        let hits = [14usize, 77, 200];
        let got = find_first_index(1000, |i| hits.contains(&i));
        assert_eq!(got, Some(14));
        assert_eq!(find_first_index(10, |_| false), None);
    }
}
