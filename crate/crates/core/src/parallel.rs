//! Capped data-parallel mapping.
//!
//! With the `parallel` feature (default), chunks run on the rayon pool;
//! without it, the same API runs sequentially — results are identical either
//! way, only wall time differs. The cap bounds in-flight work: items are
//! processed in chunks of `cap`, and a chunk must finish before the next
//! starts, so at most `cap` invocations of `f` ever run at once.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to every item, at most `cap` concurrently, preserving input
/// order in the output.
///
/// # Panics
/// Panics if `cap` is 0.
pub fn map_capped<T, R, F>(items: Vec<T>, cap: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    assert!(cap > 0, "parallelism cap must be at least 1");
    let mut out = Vec::with_capacity(items.len());
    let mut iter = items.into_iter();
    loop {
        let batch: Vec<T> = iter.by_ref().take(cap).collect();
        if batch.is_empty() {
            break;
        }
        run_batch(&mut out, batch, &f);
    }
    out
}

#[cfg(feature = "parallel")]
fn run_batch<T, R, F>(out: &mut Vec<R>, batch: Vec<T>, f: &F)
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    out.par_extend(batch.into_par_iter().map(f));
}

#[cfg(not(feature = "parallel"))]
fn run_batch<T, R, F>(out: &mut Vec<R>, batch: Vec<T>, f: &F)
where
    F: Fn(T) -> R,
{
    out.extend(batch.into_iter().map(f));
}
