use rayon::prelude::*;

/// Order-preserving parallel map on the current rayon pool.
pub fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.par_iter().map(f).collect()
}

/// Configures the global pool from `GRLB_THREADS` (if set). Returns the
/// thread count in effect.
pub fn init_from_env() -> usize {
    if let Some(n) = std::env::var("GRLB_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if n > 0 {
            // a second initialization keeps the first pool
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    rayon::current_num_threads()
}
