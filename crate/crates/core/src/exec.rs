//! Data-parallel execution helpers.
//!
//! Every parallel path here produces bit-identical results to its sequential
//! twin: work is split by output element (or by index), each element is
//! computed in a fixed order, and reductions happen sequentially afterwards.
//! Thread count therefore never changes numerics.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How data-parallel loops are executed.
///
/// `Parallel` degrades to sequential execution when the crate is built
/// without the `parallel` feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

#[cfg(feature = "parallel")]
/// Below this many scalar multiply-adds a parallel split is not worth it.
const MIN_PARALLEL_WORK: usize = 1 << 14;

impl Exec {
    /// Whether the parallel backend is compiled in.
    pub const fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    #[cfg(feature = "parallel")]
    fn go_parallel(self, work: usize) -> bool {
        self == Exec::Parallel && Self::parallel_available() && work >= MIN_PARALLEL_WORK
    }

    /// Calls `f(row_index, row)` for every `row_len`-sized chunk of `data`.
    ///
    /// `work_hint` is an estimate of total scalar operations; small jobs stay
    /// on the calling thread.
    pub fn for_each_row<F>(self, data: &mut [f64], row_len: usize, work_hint: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if row_len == 0 {
            return;
        }
        #[cfg(feature = "parallel")]
        if self.go_parallel(work_hint) {
            data.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
            return;
        }
        let _ = work_hint;
        data.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    }

    /// Maps `0..n` through `f`, preserving order.
    pub fn map<T, F>(self, n: usize, work_hint: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.go_parallel(work_hint) {
            return (0..n).into_par_iter().map(f).collect();
        }
        let _ = work_hint;
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_in_both_modes() {
        for exec in [Exec::Sequential, Exec::Parallel] {
            let out = exec.map(50_000, usize::MAX, |i| i * 2);
            assert!(out.iter().enumerate().all(|(i, &v)| v == 2 * i));
        }
    }

    #[test]
    fn rows_are_visited_with_their_index() {
        for exec in [Exec::Sequential, Exec::Parallel] {
            let mut data = vec![0.0; 4096 * 8];
            exec.for_each_row(&mut data, 8, usize::MAX, |i, row| row.fill(i as f64));
            for (i, row) in data.chunks(8).enumerate() {
                assert!(row.iter().all(|&v| v == i as f64));
            }
        }
    }
}
