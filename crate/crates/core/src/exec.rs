//! Execution policy for the embarrassingly parallel outer loops
//! (replicates, sweep points, cross-validation folds).
//!
//! With the `parallel` feature the work is spread over a rayon pool; without
//! it every map runs sequentially. Results are always collected by index, so
//! reductions happen in a fixed order and outputs do not depend on the
//! thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exec {
    threads: usize,
}

impl Default for Exec {
    fn default() -> Self {
        Exec::sequential()
    }
}

impl Exec {
    pub fn sequential() -> Self {
        Exec { threads: 1 }
    }

    /// `threads == 0` uses every available core.
    pub fn parallel(threads: usize) -> Self {
        Exec { threads }
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && self.threads != 1
    }

    /// Runs `f` with the row-parallel dense kernels limited to this
    /// policy's thread count.
    pub fn install<T, F>(&self, f: F) -> T
    where
        T: Send,
        F: FnOnce() -> T + Send,
    {
        #[cfg(feature = "parallel")]
        {
            let threads = if self.is_parallel() { self.threads } else { 1 };
            match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                Ok(pool) => return pool.install(f),
                Err(err) => log::warn!("running on the ambient pool: {err}"),
            }
        }
        f()
    }

    /// Evaluates `f(0), ..., f(n-1)` and returns the results in index order.
    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() && n > 1 {
            let build = rayon::ThreadPoolBuilder::new().num_threads(self.threads);
            match build.build() {
                Ok(pool) => return pool.install(|| (0..n).into_par_iter().map(&f).collect()),
                Err(err) => log::warn!("falling back to sequential execution: {err}"),
            }
        }
        (0..n).map(f).collect()
    }
}

/// Row-parallel map used by the dense kernels. Runs on the ambient rayon
/// pool when the feature is enabled.
pub(crate) fn map_rows<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n >= 64 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let seq = Exec::sequential().map(100, |i| i * i);
        let par = Exec::parallel(4).map(100, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn empty_map() {
        let out: Vec<usize> = Exec::parallel(2).map(0, |i| i);
        assert!(out.is_empty());
    }
}
