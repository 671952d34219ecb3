//! Mapping work over independent seeds, in parallel when the `parallel`
//! feature is enabled.

/// Apply `f` to every seed sequentially, preserving order.
pub fn map_seq<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    F: Fn(u64) -> T,
{
    seeds.iter().map(|s| f(*s)).collect()
}

/// Apply `f` to every seed on the rayon pool, preserving order.
#[cfg(feature = "parallel")]
pub fn map_par<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    use rayon::prelude::*;
    seeds.par_iter().map(|s| f(*s)).collect()
}

/// Apply `f` to every seed, using the rayon pool when available.
pub fn map_seeds<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_par(seeds, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_seq(seeds, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::runner::run;
    use crate::harness::scenario::Scenario;

    #[test]
    fn parallel_and_sequential_runs_agree() {
        let seeds: Vec<u64> = (0..6).collect();
        let digest = |seed| {
            let s = Scenario { seed, ops: 200, ..Scenario::default() };
            run(&s).unwrap().trace_text()
        };
        assert_eq!(map_seeds(&seeds, digest), map_seq(&seeds, digest));
    }
}
