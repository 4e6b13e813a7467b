//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers run on the current rayon pool;
//! without it they fall back to plain sequential iteration. Output order
//! always follows input order, so callers get identical results either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to every item, preserving order.
#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Applies `f` to `0..n`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Runs `f` with at most `workers` threads. `0` means "use the default
/// pool"; `1` runs everything on the calling thread.
#[cfg(feature = "parallel")]
pub fn with_workers<R, F>(workers: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(err) => {
            log::warn!("could not build a {workers}-thread pool ({err}); using the global pool");
            f()
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_workers<R, F>(_workers: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    f()
}

/// True when this build can actually run work on more than one thread.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
