//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the maps below run on the ambient rayon pool;
//! without it they are plain iterators. Every reduction is performed over
//! fixed-size chunks whose partial results are combined in chunk order, so
//! floating-point results do not depend on the number of worker threads.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows per chunk in ordered reductions. Fixed so sums are reproducible.
pub const CHUNK: usize = 256;

/// `(0..n).map(f).collect()`, possibly in parallel, order preserved.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Maps over a slice, possibly in parallel, order preserved.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Folds `items` in fixed chunks of [`CHUNK`], then merges the chunk
/// accumulators left to right.
pub fn chunked_fold<S, A, E, Init, Step, Merge>(
    items: &[S],
    init: Init,
    step: Step,
    merge: Merge,
) -> Result<A, E>
where
    S: Sync,
    A: Send,
    E: Send,
    Init: Fn() -> A + Sync + Send,
    Step: Fn(&mut A, &S) -> Result<(), E> + Sync + Send,
    Merge: Fn(&mut A, A),
{
    let chunks: Vec<&[S]> = items.chunks(CHUNK).collect();
    let partials = map_slice(&chunks, |chunk| {
        let mut acc = init();
        for item in chunk.iter() {
            step(&mut acc, item)?;
        }
        Ok(acc)
    });
    let mut total = init();
    for p in partials {
        merge(&mut total, p?);
    }
    Ok(total)
}

/// Ordered sum of `f` over `items`.
pub fn ordered_sum<S, E, F>(items: &[S], f: F) -> Result<f64, E>
where
    S: Sync,
    E: Send,
    F: Fn(&S) -> Result<f64, E> + Sync + Send,
{
    chunked_fold(
        items,
        || 0.0,
        |acc, s| {
            *acc += f(s)?;
            Ok(())
        },
        |acc, p| *acc += p,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let v = map_range(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }

    #[test]
    fn ordered_sum_matches_chunk_order() {
        let xs: Vec<f64> = (0..1000).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let s: f64 = ordered_sum::<_, (), _>(&xs, |&x| Ok(x)).unwrap();
        let mut expect = 0.0;
        for chunk in xs.chunks(CHUNK) {
            let mut c = 0.0;
            for x in chunk {
                c += x;
            }
            expect += c;
        }
        assert_eq!(s.to_bits(), expect.to_bits());
    }

    #[test]
    fn errors_propagate() {
        let xs = vec![1.0, 2.0, -1.0];
        let r = ordered_sum(&xs, |&x| if x < 0.0 { Err("neg") } else { Ok(x) });
        assert_eq!(r, Err("neg"));
    }
}
