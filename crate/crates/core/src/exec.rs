//! Data-parallel execution strategy.
//!
//! Batch elements, dataset samples and grad-check coordinates are all
//! independent, so the hot loops map over them with rayon when the
//! `parallel` feature is enabled. The sequential path is the bit-exact
//! reference; the parallel path reduces in index order so results match the
//! sequential path except for scheduling.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl ExecMode {
    pub fn from_deterministic(deterministic: bool) -> Self {
        if deterministic {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        }
    }
}

/// Map `f` over `0..n`, returning results in index order.
pub fn ordered_map<R, F>(mode: ExecMode, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => parallel_map(n, f),
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let a = ordered_map(ExecMode::Sequential, 100, |i| i * i);
        let b = ordered_map(ExecMode::Parallel, 100, |i| i * i);
        assert_eq!(a, b);
    }
}
