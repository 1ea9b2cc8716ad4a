//! Chunked data-parallel map used for CEM population scoring.
//!
//! Work is always split into the same fixed-size chunks and results are
//! concatenated in chunk order, so parallel and sequential execution return
//! bit-identical vectors. Without the `parallel` feature every mode runs
//! sequentially.

use std::ops::Range;

/// Candidates scored per work item.
pub const CHUNK: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Parallel when the feature is compiled in.
    #[default]
    Auto,
    Sequential,
    Parallel,
}

fn ranges(len: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..len)
        .step_by(chunk)
        .map(|s| s..(s + chunk).min(len))
        .collect()
}

/// Applies `f` to consecutive index ranges of `0..len` and concatenates the results.
pub fn map_chunks<T, F>(len: usize, chunk: usize, mode: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> Vec<T> + Sync + Send,
{
    let parts = ranges(len, chunk);
    let run_parallel = cfg!(feature = "parallel") && mode != Execution::Sequential && parts.len() > 1;
    let pieces: Vec<Vec<T>> = if run_parallel {
        par_map(parts, &f)
    } else {
        parts.into_iter().map(&f).collect()
    };
    pieces.into_iter().flatten().collect()
}

#[cfg(feature = "parallel")]
fn par_map<T, F>(parts: Vec<Range<usize>>, f: &F) -> Vec<Vec<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> Vec<T> + Sync + Send,
{
    use rayon::prelude::*;
    parts.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, F>(parts: Vec<Range<usize>>, f: &F) -> Vec<Vec<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> Vec<T> + Sync + Send,
{
    parts.into_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_preserve_order() {
        let f = |r: Range<usize>| r.map(|i| (i as f64).sqrt().sin()).collect::<Vec<_>>();
        let a = map_chunks(523, 50, Execution::Sequential, f);
        let b = map_chunks(523, 50, Execution::Parallel, f);
        assert_eq!(a.len(), 523);
        assert_eq!(a, b);
        assert_eq!(a[100], (100f64).sqrt().sin());
    }

    #[test]
    fn empty_input() {
        let v: Vec<u8> = map_chunks(0, 8, Execution::Auto, |r| r.map(|_| 0u8).collect());
        assert!(v.is_empty());
    }
}
