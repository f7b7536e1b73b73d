//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) independent work items are spread
//! over rayon's pool; without it every call falls back to a sequential loop.
//! Results are always returned in input order, so the choice never changes
//! output.

/// How batch work is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// `true` when this build can actually run work in parallel.
    pub fn is_parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Maps `f` over `0..count`, preserving order.
pub fn map_indexed<U, F>(exec: Execution, count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..count).into_par_iter().map(f).collect()
        }
        _ => (0..count).map(f).collect(),
    }
}

/// Maps `f` over a slice, preserving order.
pub fn map_slice<T, U, F>(exec: Execution, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Runs `op` with at most `jobs` worker threads. `jobs <= 1` runs the
/// closure with [`Execution::Sequential`].
pub fn with_jobs<R: Send>(jobs: Option<usize>, op: impl FnOnce(Execution) -> R + Send) -> R {
    match jobs {
        Some(0) | Some(1) => op(Execution::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| op(Execution::Parallel)),
            Err(_) => op(Execution::Parallel),
        },
        _ => op(Execution::Parallel),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let seq = map_indexed(Execution::Sequential, 100, |i| i * i);
        let par = map_indexed(Execution::Parallel, 100, |i| i * i);
        assert_eq!(seq, par);
        let items: Vec<u32> = (0..50).collect();
        assert_eq!(map_slice(Execution::Parallel, &items, |x| x + 1)[49], 50);
        assert_eq!(
            with_jobs(Some(3), |e| map_indexed(e, 10, |i| i)),
            (0..10).collect::<Vec<_>>()
        );
    }
}
