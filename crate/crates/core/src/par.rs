//! Data-parallel helpers.
//!
//! With the `parallel` feature (on by default) independent work items are
//! spread over the rayon pool. Without it, or when [`Execution::Sequential`]
//! is requested, the same closures run in index order on the calling thread.
//! Both paths return results in index order, and reductions over floats are
//! always combined in a fixed order, so output is bit-identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// True when work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// `(0..n).map(f)` collected in order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Applies `f` to every element of `items` in place, possibly concurrently.
pub fn for_each_mut<T, F>(exec: Execution, items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        items
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, item)| f(i, item));
        return;
    }
    let _ = exec;
    for (i, item) in items.iter_mut().enumerate() {
        f(i, item);
    }
}

/// Fixed chunk width for order-stable reductions.
pub const REDUCE_CHUNK: usize = 256;

/// Sums `n` vector-valued terms of length `width`.
///
/// Terms are accumulated inside fixed chunks of [`REDUCE_CHUNK`] indices and
/// the chunk partials are then added in chunk order, so the floating-point
/// result does not depend on the thread count.
pub fn chunked_vector_sum<F>(exec: Execution, n: usize, width: usize, term: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partial = |c: usize| {
        let mut acc = vec![0.0; width];
        let end = ((c + 1) * REDUCE_CHUNK).min(n);
        for i in c * REDUCE_CHUNK..end {
            term(i, &mut acc);
        }
        acc
    };
    let partials = if chunks > 1 {
        map_indexed(exec, chunks, partial)
    } else {
        (0..chunks).map(partial).collect()
    };
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Scalar counterpart of [`chunked_vector_sum`].
pub fn chunked_sum<F>(exec: Execution, n: usize, term: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    chunked_vector_sum(exec, n, 1, |i, acc| acc[0] += term(i))[0]
}
