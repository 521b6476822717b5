//! Execution mode for independent per-client work.
//!
//! Both modes produce identical results: work items never share mutable
//! state, results come back in input order, and every reduction happens
//! afterwards in that order.

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rayon's global pool when built with the `parallel` feature; the same
    /// as `Sequential` otherwise.
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
    /// Apply `f` to every item. On failure, the error of the lowest-index
    /// failing item is returned.
    pub fn map<I, T, F>(self, items: &[I], f: F) -> Result<Vec<T>>
    where
        I: Sync,
        T: Send,
        F: Fn(&I) -> Result<T> + Sync,
    {
        let results: Vec<Result<T>> = match self {
            Execution::Sequential => items.iter().map(&f).collect(),
            Execution::Parallel => par_map(items, &f),
        };
        results.into_iter().collect()
    }
}

#[cfg(feature = "parallel")]
fn par_map<I: Sync, T: Send, F: Fn(&I) -> Result<T> + Sync>(items: &[I], f: &F) -> Vec<Result<T>> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<I: Sync, T: Send, F: Fn(&I) -> Result<T> + Sync>(items: &[I], f: &F) -> Vec<Result<T>> {
    items.iter().map(f).collect()
}
