//! Execution mode for the data-parallel loops.
//!
//! Every parallel loop in the crate goes through [`map_indexed`], which
//! returns results in index order. Reductions are then performed serially
//! over the ordered output, so results never depend on the thread count.

/// How per-path work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Serial,
    /// Rayon work stealing. Falls back to serial when the `parallel`
    /// feature is disabled.
    #[default]
    Parallel,
}

impl ExecMode {
    /// Whether this build can actually run in parallel.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Evaluates `f(0..n)` and collects the results in index order.
pub fn map_indexed<T, F>(n: usize, mode: ExecMode, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Caps the global worker pool. Must be called before any parallel work;
/// returns `false` if the pool was already initialised or the build is serial.
pub fn configure_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_preserve_order() {
        let f = |i: usize| (i as f64).sqrt();
        let a = map_indexed(1000, ExecMode::Serial, f);
        let b = map_indexed(1000, ExecMode::Parallel, f);
        assert_eq!(a, b);
        assert_eq!(a[16], 4.0);
    }
}
