//! Data-parallel map helpers.
//!
//! The hot loops (batch hashing, suspect querying, attack replay) are all
//! embarrassingly parallel over independent inputs. With the default
//! `parallel` feature they fan out on the rayon pool; without it they run
//! sequentially with identical results, since output order is preserved
//! either way. The `_seq` variants exist unconditionally so benchmarks can
//! compare both paths in one build.

/// Order-preserving map over a slice, parallel when the `parallel` feature
/// is enabled.
#[cfg(feature = "parallel")]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Order-preserving map over a slice, parallel when the `parallel` feature
/// is enabled.
#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    map_collect_seq(items, f)
}

/// Always-sequential variant.
pub fn map_collect_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}
