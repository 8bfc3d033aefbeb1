use livar_core::fed::{ClientExecutor, ClientUpdate};
use livar_core::Result;
use rayon::prelude::*;

/// Runs clients on the rayon pool. Results come back in client order, so
/// the server merge sees exactly what [`livar_core::fed::Sequential`] would.
#[derive(Debug, Clone, Copy, Default)]
pub struct Parallel;

impl ClientExecutor for Parallel {
    fn run_clients<F>(&self, count: usize, job: F) -> Vec<Result<ClientUpdate>>
    where
        F: Fn(usize) -> Result<ClientUpdate> + Send + Sync,
    {
        (0..count).into_par_iter().map(job).collect()
    }
}
