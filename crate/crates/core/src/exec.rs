//! Order-preserving map over independent tasks, run on a rayon pool when the
//! `parallel` feature is enabled and sequentially otherwise.
//!
//! Results always come back in task-index order, so anything assembled from
//! them is independent of scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// rayon's global pool; sequential without the `parallel` feature.
    #[default]
    Parallel,
    /// Dedicated pool with this many threads.
    Workers(usize),
}

impl Execution {
    /// `workers == 1` means sequential, `0` means the default pool.
    pub fn from_workers(workers: usize) -> Self {
        match workers {
            0 => Execution::Parallel,
            1 => Execution::Sequential,
            n => Execution::Workers(n),
        }
    }

    pub fn is_parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// `(0..len).map(task).collect()`, possibly in parallel.
pub fn map_indexed<T, F>(len: usize, mode: Execution, task: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        Execution::Sequential => (0..len).map(task).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..len).into_par_iter().map(task).collect(),
        #[cfg(feature = "parallel")]
        Execution::Workers(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| (0..len).into_par_iter().map(task).collect()),
            Err(_) => (0..len).map(task).collect(),
        },
        #[cfg(not(feature = "parallel"))]
        Execution::Parallel | Execution::Workers(_) => (0..len).map(task).collect(),
    }
}

/// Folds `(0..len)` into per-chunk accumulators and combines them in index
/// order. The chunking is fixed by `chunk`, not by the thread count, so
/// floating-point results do not depend on the pool size.
pub fn chunked_reduce<A, F, G>(len: usize, chunk: usize, mode: Execution, fold: F, combine: G) -> Option<A>
where
    A: Send,
    F: Fn(std::ops::Range<usize>) -> A + Sync + Send,
    G: Fn(A, A) -> A,
{
    let chunk = chunk.max(1);
    let chunks = len.div_ceil(chunk);
    let parts = map_indexed(chunks, mode, |c| fold(c * chunk..((c + 1) * chunk).min(len)));
    parts.into_iter().reduce(combine)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_preserve_order() {
        let f = |i: usize| (i as f64).sqrt() * 3.0;
        let seq = map_indexed(1000, Execution::Sequential, f);
        assert_eq!(seq, map_indexed(1000, Execution::Parallel, f));
        assert_eq!(seq, map_indexed(1000, Execution::Workers(3), f));
        assert_eq!(seq[10], f(10));
    }

    #[test]
    fn chunked_sum_is_pool_independent() {
        let xs: Vec<f64> = (0..10_001).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let sum = |mode| chunked_reduce(xs.len(), 257, mode, |r| xs[r].iter().sum::<f64>(), |a, b| a + b).unwrap();
        let s = sum(Execution::Sequential);
        assert_eq!(s.to_bits(), sum(Execution::Parallel).to_bits());
        assert_eq!(s.to_bits(), sum(Execution::Workers(2)).to_bits());
        assert!(chunked_reduce(0, 4, Execution::Sequential, |_| 1, |a, b| a + b).is_none());
    }

    #[test]
    fn worker_count_mapping() {
        assert_eq!(Execution::from_workers(1), Execution::Sequential);
        assert_eq!(Execution::from_workers(0), Execution::Parallel);
        assert_eq!(Execution::from_workers(4), Execution::Workers(4));
    }
}
