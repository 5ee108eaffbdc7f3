//! Execution policy for the data-parallel loops.
//!
//! Every parallel loop in this crate writes to disjoint output slots or
//! reduces in a fixed order, so both policies produce bitwise-identical
//! results. Without the `parallel` feature, [`Exec::Parallel`] silently
//! runs sequentially.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Whether this policy actually runs on the rayon pool in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Apply `f(chunk_index, out_chunk)` over `out` split into chunks of `chunk`
/// elements.
pub(crate) fn for_each_chunk_mut<T, F>(exec: Exec, out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Map `0..n` through `f`, collecting in index order.
pub(crate) fn map_indices<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Cap the global rayon pool. `0` leaves the default (one worker per core).
/// Returns false if the pool was already initialised.
pub fn init_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            return true;
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        true
    }
}
