//! Sequential or rayon-backed mapping over independent work items.
//!
//! Results always come back in input order, so reductions over them are
//! deterministic regardless of the executor.

use crate::error::Result;

/// Defaults to `Parallel` when the `parallel` feature is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

pub fn map<I, O, F>(exec: Exec, items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync + Send,
{
    match exec {
        Exec::Sequential => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
        }
    }
}

/// Like [`map`], failing with the error of the lowest-indexed failing item.
pub fn try_map<I, O, F>(exec: Exec, items: &[I], f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> Result<O> + Sync + Send,
{
    map(exec, items, f).into_iter().collect()
}
