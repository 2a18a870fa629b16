//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper here produces bit-identical output regardless of the number
//! of worker threads: maps preserve index order, and sums use a pairwise tree
//! whose shape depends only on the input length.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Leaf size of the pairwise summation tree.
const PAIRWISE_LEAF: usize = 32;

/// Above this length the two halves of the tree are summed on separate workers.
#[cfg(feature = "parallel")]
const PARALLEL_SPLIT: usize = 1 << 14;

/// Evaluates `f(0..n)` and collects the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
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

/// Fallible variant of [`map_indexed`]; returns the first error by index.
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

/// Pairwise sum with a fixed tree shape.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    let n = values.len();
    if n <= PAIRWISE_LEAF {
        let mut acc = 0.0;
        for &v in values {
            acc += v;
        }
        return acc;
    }
    let mid = n / 2;
    let (lo, hi) = values.split_at(mid);
    #[cfg(feature = "parallel")]
    {
        if n >= PARALLEL_SPLIT {
            let (a, b) = rayon::join(|| pairwise_sum(lo), || pairwise_sum(hi));
            return a + b;
        }
    }
    pairwise_sum(lo) + pairwise_sum(hi)
}

/// Sums `f(0..n)` deterministically: values are materialized in index order
/// and reduced with [`pairwise_sum`].
pub fn sum_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    pairwise_sum(&map_indexed(n, f))
}

/// Runs `op` on a dedicated pool with `workers` threads. `None` uses the
/// ambient pool; without the `parallel` feature the closure runs inline.
pub fn with_workers<R, F>(workers: Option<usize>, op: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = workers {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
                return pool.install(op);
            }
        }
        op()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        op()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_exact_values() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn sum_is_independent_of_worker_count() {
        let f = |i: usize| ((i as f64) * 0.7311).sin() * 1e-3 + 1.0 / (1.0 + i as f64);
        let n = 100_000;
        let one = with_workers(Some(1), || sum_indexed(n, f));
        let four = with_workers(Some(4), || sum_indexed(n, f));
        assert_eq!(one.to_bits(), four.to_bits());
    }

    #[test]
    fn map_preserves_order() {
        let v = with_workers(Some(3), || map_indexed(500, |i| i * 2));
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }
}
