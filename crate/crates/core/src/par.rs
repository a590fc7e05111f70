//! Order-preserving data-parallel map.
//!
//! With the `parallel` feature, work runs on a rayon pool of the requested
//! size; without it (or with one worker) it runs on the calling thread. Results
//! are identical either way because every item derives its own seed.

/// How a batch of independent items is scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub workers: usize,
}

impl Schedule {
    pub const SEQUENTIAL: Schedule = Schedule { workers: 1 };

    pub fn new(workers: usize) -> Self {
        Self { workers: workers.max(1) }
    }

    /// Collapse to one worker when a backend declares single-flight.
    pub fn respecting(self, single_flight: bool) -> Self {
        if single_flight {
            Self::SEQUENTIAL
        } else {
            self
        }
    }

    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && self.workers > 1
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::new(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
    }
}

/// `items.iter().map(f).collect()`, possibly in parallel; output order matches input.
pub fn map_ordered<T, R, F>(items: &[T], schedule: Schedule, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if schedule.is_parallel() {
        use rayon::prelude::*;
        match rayon::ThreadPoolBuilder::new().num_threads(schedule.workers).build() {
            Ok(pool) => return pool.install(|| items.par_iter().map(&f).collect()),
            Err(e) => tracing::warn!("falling back to sequential execution: {e}"),
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = schedule;
    items.iter().map(f).collect()
}
