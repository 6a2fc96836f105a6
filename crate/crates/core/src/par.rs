use rayon::prelude::*;

/// Rows per work unit. Fixed so that partial results, and therefore the
/// final floating-point sums, do not depend on the thread count.
pub const CHUNK: usize = 512;

/// Folds `items` in fixed-size chunks (in parallel), then merges the chunk
/// accumulators left to right.
pub fn chunked_reduce<T, A, I, F, M>(items: &[T], init: I, fold: F, merge: M) -> A
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, &T) + Sync,
    M: Fn(&mut A, A),
{
    let parts: Vec<A> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = init();
            for it in chunk {
                fold(&mut acc, it);
            }
            acc
        })
        .collect();
    let mut total = init();
    for p in parts {
        merge(&mut total, p);
    }
    total
}
