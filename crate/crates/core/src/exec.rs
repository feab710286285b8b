//! Sequential / data-parallel execution switch.
//!
//! Every batch loop in the crate (per-trace curation, sweeps, gradient
//! accumulation, fuzzy window scans) is written as an indexed map whose
//! results are collected in input order, so the two modes produce identical
//! output. Without the `parallel` feature, [`ExecMode::Parallel`] silently
//! degrades to sequential execution.

/// How a batch loop is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// True when this mode will actually fan out work.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

/// Maps `f` over `items`, returning results in input order.
pub fn map<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = mode;
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_range<R, F>(mode: ExecMode, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Maps `f` over fixed-size chunks of `items`. Chunk boundaries do not depend
/// on the thread count, so an ordered reduction over the returned partials is
/// bitwise reproducible across modes.
pub fn map_chunks<T, R, F>(mode: ExecMode, items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.par_chunks(chunk).map(f).collect();
    }
    let _ = mode;
    items.chunks(chunk).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_on_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = map(ExecMode::Sequential, &xs, |x| x * x);
        let b = map(ExecMode::Parallel, &xs, |x| x * x);
        assert_eq!(a, b);
        let c = map_range(ExecMode::Parallel, 1000, |i| (i as u64) * (i as u64));
        assert_eq!(a, c);
    }

    #[test]
    fn chunked_partials_are_reproducible() {
        let xs: Vec<f64> = (0..10_001).map(|i| (i as f64).sin() * 1e-3).collect();
        let sum = |mode| -> f64 {
            map_chunks(mode, &xs, 64, |c| c.iter().sum::<f64>())
                .into_iter()
                .sum()
        };
        assert_eq!(
            sum(ExecMode::Sequential).to_bits(),
            sum(ExecMode::Parallel).to_bits()
        );
    }
}
