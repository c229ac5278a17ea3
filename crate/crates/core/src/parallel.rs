//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper returns results in index order and never reduces across
//! threads, so outputs are bitwise identical whatever the worker count.
//! With the `parallel` feature off, or inside [`Parallelism::install`] with one
//! worker, everything runs on the calling thread.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Whether this build can run helpers on more than one thread.
pub fn is_parallel_available() -> bool {
    cfg!(feature = "parallel")
}

fn sequential_here() -> bool {
    !is_parallel_available() || FORCE_SEQUENTIAL.with(Cell::get)
}

/// Worker-count policy for a region of work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Parallelism {
    workers: usize,
}

impl Parallelism {
    pub fn sequential() -> Self {
        Self { workers: 1 }
    }

    /// `workers == 0` means "all available cores".
    pub fn with_workers(workers: usize) -> Self {
        if workers == 0 {
            Self::available()
        } else {
            Self { workers }
        }
    }

    pub fn available() -> Self {
        let workers = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        Self { workers }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Runs `f` under this policy. Helpers called (directly or transitively)
    /// from `f` use at most `workers` threads.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        if self.workers <= 1 || !is_parallel_available() {
            let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
            let out = f();
            FORCE_SEQUENTIAL.with(|c| c.set(prev));
            return out;
        }
        #[cfg(feature = "parallel")]
        {
            match rayon::ThreadPoolBuilder::new().num_threads(self.workers).build() {
                Ok(pool) => pool.install(f),
                Err(e) => {
                    log::warn!("thread pool unavailable ({e}); running sequentially");
                    f()
                }
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            f()
        }
    }
}

impl Default for Parallelism {
    fn default() -> Self {
        Self::available()
    }
}

/// `(0..n).map(f)`, possibly in parallel.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !sequential_here() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// `items.iter().map(f)`, possibly in parallel.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !sequential_here() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Calls `f(index, chunk)` for each `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if !sequential_here() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}
