//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it,
//! or when the caller asks for a single worker, they run on the calling thread.
//! Every helper preserves input order in its output so results never depend
//! on scheduling.

/// How many workers a parallel section may use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    /// Use the ambient rayon pool.
    #[default]
    Auto,
    /// Use a dedicated pool with this many threads.
    Threads(usize),
}

impl Parallelism {
    pub fn from_workers(workers: usize) -> Self {
        if workers <= 1 {
            Parallelism::Sequential
        } else {
            Parallelism::Threads(workers)
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self != Parallelism::Sequential
    }
}

/// Runs `f` inside a pool matching `par`.
pub fn install<R: Send>(par: Parallelism, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if let Parallelism::Threads(n) = par {
        match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => return pool.install(f),
            Err(e) => log::warn!("could not build {n}-thread pool, using global pool: {e}"),
        }
    }
    let _ = par;
    f()
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(par: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        return install(par, || items.par_iter().map(&f).collect());
    }
    let _ = par;
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(par: Parallelism, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        return install(par, || (0..n).into_par_iter().map(&f).collect());
    }
    let _ = par;
    (0..n).map(f).collect()
}

/// Calls `f` on every item; `f` must tolerate arbitrary interleaving.
pub fn for_each<T, F>(par: Parallelism, items: &[T], f: F)
where
    T: Sync,
    F: Fn(&T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        return install(par, || items.par_iter().for_each(&f));
    }
    let _ = par;
    items.iter().for_each(f)
}

/// Number of threads a section run under `par` would use.
pub fn current_threads(par: Parallelism) -> usize {
    match par {
        Parallelism::Sequential => 1,
        Parallelism::Threads(n) if cfg!(feature = "parallel") => n,
        #[cfg(feature = "parallel")]
        Parallelism::Auto => rayon::current_num_threads(),
        _ => 1,
    }
}
