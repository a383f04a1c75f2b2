//! Replica execution: the same closure over replica indices `0..reps`, run
//! either sequentially or on the rayon pool. Results are always returned in
//! replica order, so downstream reductions do not depend on scheduling.

/// How independent replicas are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Evaluates `f(r)` for every replica `r < reps`, in replica order.
pub fn map_replicas<T, F>(exec: Execution, reps: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..reps).into_par_iter().map(f).collect()
        }
        _ => (0..reps).map(f).collect(),
    }
}

/// Number of worker threads `Parallel` would use.
pub fn worker_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_execution() {
        let f = |r: u64| r.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 7;
        assert_eq!(map_replicas(Execution::Sequential, 1000, f), map_replicas(Execution::Parallel, 1000, f));
        assert!(map_replicas(Execution::default(), 0, f).is_empty());
    }
}
