//! Deterministic fan-out over path indices.
//!
//! Results are always collected in index order and reduced sequentially by the
//! caller, so numeric output does not depend on the worker count.

use rayon::prelude::*;

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Executor {
    workers: usize,
}

impl Default for Executor {
    fn default() -> Self {
        Self { workers: 1 }
    }
}

impl Executor {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(invalid("workers", "must be positive"));
        }
        Ok(Self { workers })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// `[f(0), f(1), .., f(n-1)]`, evaluated on up to `workers` threads.
    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        if self.workers == 1 || n < 2 {
            return (0..n).map(f).collect();
        }
        match rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
        {
            Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
            Err(_) => (0..n).map(f).collect(),
        }
    }

    /// Like [`Executor::map`] but stops at the first error (lowest index wins).
    pub fn try_map<T, E, F>(&self, n: usize, f: F) -> std::result::Result<Vec<T>, E>
    where
        T: Send,
        E: Send,
        F: Fn(usize) -> std::result::Result<T, E> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_workers() {
        let f = |i: usize| ((i as f64) * 0.37).sin();
        let one = Executor::new(1).unwrap().map(1000, f);
        for w in [2, 3, 8] {
            assert_eq!(Executor::new(w).unwrap().map(1000, f), one);
        }
        assert!(Executor::new(0).is_err());
    }

    #[test]
    fn first_error_wins() {
        let r: std::result::Result<Vec<usize>, usize> = Executor::new(4)
            .unwrap()
            .try_map(100, |i| if i % 30 == 29 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(29));
    }
}
