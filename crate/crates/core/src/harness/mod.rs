//! Operational shell: run configuration, training loops for both stages,
//! checkpointing, evaluation, and image-grid emission.

pub mod checkpoint;
pub mod config;
pub mod grid;
pub mod metrics;
pub mod pipeline;
pub mod tocg;
pub mod toig;

/// Run a closure inside a rayon pool with the requested thread count;
/// 0 keeps the global pool. Results are bit-identical either way because
/// all reductions happen in sample order.
pub fn run_in_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        f()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
            .install(f)
    }
}
