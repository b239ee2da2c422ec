//! Order-preserving data-parallel map with a sequential fallback.
//!
//! Everything that fans out (tree growing, one-vs-rest fits, per-recording
//! classification, batch feature extraction) goes through [`maybe_par_map`],
//! so builds without the `parallel` feature swap in a plain iterator and
//! produce identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over the items, on rayon when the `parallel` feature is enabled.
/// Output order always matches input order, so results are independent of
/// scheduling.
#[cfg(feature = "parallel")]
pub fn maybe_par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn maybe_par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_iter().map(f).collect()
}

/// Always-sequential map with the same signature; the benchmark baseline the
/// parallel path is compared against.
pub fn seq_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_iter().map(f).collect()
}
