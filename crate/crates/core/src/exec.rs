//! Execution mode for the data-parallel kernels.
//!
//! With the `parallel` feature (default) the hot loops fan out over rayon.
//! Without it everything runs on the calling thread. The mode can also be
//! switched at runtime, which is what the benchmarks use to compare both
//! paths in one build.
//!
//! Work is always split so that each output element is produced by exactly
//! one task with a fixed accumulation order, so both modes give bitwise
//! identical results.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(if cfg!(feature = "parallel") { 1 } else { 0 });

/// Select the execution mode. `Parallel` degrades to `Sequential` when the
/// crate was built without the `parallel` feature.
pub fn set_mode(mode: ExecMode) {
    let v = match mode {
        ExecMode::Parallel if cfg!(feature = "parallel") => 1,
        _ => 0,
    };
    MODE.store(v, Ordering::Relaxed);
}

pub fn mode() -> ExecMode {
    if MODE.load(Ordering::Relaxed) == 1 {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

/// Apply `f` to consecutive chunks of `data` (the last one may be short).
/// `f` receives the chunk index.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if mode() == ExecMode::Parallel && data.len() > chunk {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Evaluate `f(0..n)` and collect the results in index order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if mode() == ExecMode::Parallel && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_results_do_not_depend_on_mode() {
        let run = |m: ExecMode| {
            set_mode(m);
            let mut v = vec![0.0; 1000];
            for_each_chunk_mut(&mut v, 64, |i, c| {
                for (j, x) in c.iter_mut().enumerate() {
                    *x = ((i * 64 + j) as f64).sqrt().sin();
                }
            });
            let m2 = map_indices(50, |i| (i as f64 * 0.1).exp());
            (v, m2)
        };
        let a = run(ExecMode::Sequential);
        let b = run(ExecMode::Parallel);
        set_mode(ExecMode::Parallel);
        assert_eq!(a, b);
    }
}
