// SPDX-License-Identifier: Apache-2.0

//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Execution::Parallel`] fans work
//! out over rayon's pool; without it every call runs sequentially. Callers
//! hand in closures that depend only on the item index, and results are
//! collected in index order, so output never depends on the worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Execution {
    #[cfg_attr(feature = "parallel", default)]
    Parallel,
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
}

impl Execution {
    /// Whether this build can actually run work in parallel.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// `(0..n).map(f)` collected in order.
pub fn map_indexed<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Like [`map_indexed`] but stops at the first error (by index order).
pub fn try_map_indexed<R, E, F>(exec: Execution, n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    map_indexed(exec, n, f).into_iter().collect()
}
