//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] runs on the rayon
//! pool; without it every call runs sequentially. Results are always merged
//! in index order, so the two paths return identical values.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// `f(0), f(1), …, f(n-1)` collected in index order.
pub fn map_range<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Index and value of the smallest `f(i)`; ties resolve to the lowest index.
///
/// The `(value, index)` order is total, so the answer does not depend on how
/// the range is partitioned. Returns `None` for an empty range.
pub fn argmin_range<F>(exec: Exec, n: usize, f: F) -> Option<(usize, f64)>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let better = |a: (usize, f64), b: (usize, f64)| -> (usize, f64) {
        match a.1.total_cmp(&b.1) {
            std::cmp::Ordering::Less => a,
            std::cmp::Ordering::Greater => b,
            std::cmp::Ordering::Equal => {
                if a.0 <= b.0 {
                    a
                } else {
                    b
                }
            }
        }
    };
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(|i| (i, f(i))).reduce_with(better);
    }
    let _ = exec;
    (0..n).map(|i| (i, f(i))).reduce(better)
}

/// Largest `f(i)` over the range, `-inf` when empty.
pub fn max_range<F>(exec: Exec, n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).reduce(|| f64::NEG_INFINITY, f64::max);
    }
    let _ = exec;
    (0..n).map(f).fold(f64::NEG_INFINITY, f64::max)
}
