//! Data-parallel helpers. With the `parallel` feature (default) work is
//! spread over the rayon pool; without it everything runs sequentially.
//! Results always come back in input order, so reductions performed by the
//! caller are deterministic either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Uses rayon when compiled with the `parallel` feature, otherwise
    /// identical to [`Execution::Sequential`].
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
    /// `items.iter().map(f)` collected in order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    /// `(0..n).map(f)` collected in order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Splits `n` items into contiguous chunks of `chunk` and maps each
    /// chunk range; useful when per-item work is too small to schedule alone.
    pub fn map_chunks<R, F>(self, n: usize, chunk: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(std::ops::Range<usize>) -> R + Sync + Send,
    {
        let chunk = chunk.max(1);
        let count = n.div_ceil(chunk);
        self.map_range(count, |c| f(c * chunk..((c + 1) * chunk).min(n)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = Execution::Sequential.map(&xs, |x| x * x);
        let b = Execution::Parallel.map(&xs, |x| x * x);
        assert_eq!(a, b);
        let c = Execution::Parallel.map_chunks(1000, 7, |r| r.len());
        assert_eq!(c.iter().sum::<usize>(), 1000);
    }
}
