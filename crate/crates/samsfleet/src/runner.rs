use rayon::prelude::*;
use samsfleet_core::a2c::RolloutRunner;
use samsfleet_core::sim::EpisodeTrace;
use samsfleet_core::Result;

/// Runs episodes on the rayon pool. Results keep the order of `seeds`, so
/// output does not depend on the thread count.
#[derive(Debug, Clone, Copy, Default)]
pub struct ParallelRunner;

impl RolloutRunner for ParallelRunner {
    fn run_all(&self, seeds: &[u64], job: &(dyn Fn(u64) -> Result<EpisodeTrace> + Sync)) -> Vec<Result<EpisodeTrace>> {
        seeds.par_iter().map(|&s| job(s)).collect()
    }
}
