//! Seeded Monte Carlo experiments.
//!
//! Replication `r` of every grid point draws from `RngStream(seed, r)`, so
//! grid points share random numbers and all estimators are paired within a
//! replication. Reductions go through [`crate::stats::accumulate`], which
//! makes results independent of the thread count.

mod engine;
mod output;
mod selection;
mod spec;

pub use engine::{run_mse_experiment, EstimatorResult, McSummary, PointSummary};
pub use output::{fmt_float, improvement_grid};
pub use selection::{run_selection_experiment, SelectionTable};
pub use spec::{BSpec, EstimatorSpec, ExperimentSpec, GridPoint, SigmaSpec, Setting, XSource};

use crate::error::{Error, Result};
use crate::matstat::{derive_seed, standard_normal_matrix, Matrix, RngStream};
use crate::regression::read_matrix_csv;

const FIXED_DESIGN_LABEL: u64 = 0x4649_5845_445f_5800;

/// Runs `f` on a dedicated rayon pool with `threads` workers, or on the
/// global pool when `threads` is `None`.
pub fn in_pool<T, F>(threads: Option<usize>, f: F) -> Result<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::Config("threads must be at least 1".into())),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Design held fixed over all replications: read from file, or drawn once
/// from a stream derived from the experiment seed.
fn fixed_design(spec: &ExperimentSpec, n: usize, p: usize) -> Result<Matrix> {
    match &spec.x_source {
        XSource::File { path, header } => {
            let x = read_matrix_csv(path, *header)?;
            if x.shape() != (n, p) {
                return Err(Error::Config(format!(
                    "design file is {}x{}, expected {n}x{p}",
                    x.nrows(),
                    x.ncols()
                )));
            }
            Ok(x)
        }
        XSource::Generated => {
            let mut rng = RngStream::new(derive_seed(spec.seed, FIXED_DESIGN_LABEL), 0).rng();
            Ok(standard_normal_matrix(n, p, &mut rng))
        }
    }
}
