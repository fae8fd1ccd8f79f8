//! Data-parallel helpers.
//!
//! Every batch-level loop in the crate (per-window gradients, per-document
//! evaluation, per-example QA reading) goes through [`map`]. Results always
//! come back in input order and every reduction over them is done
//! sequentially by the caller, so output is bit-identical whether the work
//! ran on one thread or many.
//!
//! With the `parallel` feature disabled, [`Execution::Parallel`] falls back
//! to the sequential path.

/// How a batch loop is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True when this build can actually run work on more than one thread.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Order-preserving map over mutable items.
pub fn map_mut<T, R, F>(exec: Execution, items: &mut [T], f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(&mut T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter_mut().map(f).collect();
    }
    let _ = exec;
    items.iter_mut().map(f).collect()
}
