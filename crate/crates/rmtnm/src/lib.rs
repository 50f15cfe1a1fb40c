//! Monte Carlo simulation of a qubit coupled to a random-matrix environment,
//! with divisibility- and contractivity-based non-Markovianity criteria and
//! measures evaluated over the (Delta, lambda) parameter plane.

pub mod channel;
pub mod cli;
pub mod dynamics;
pub mod measures;
pub mod rmt;
pub mod sweep;

mod fsutil;

use std::sync::Once;

extern "C" {
    fn openblas_set_num_threads(num_threads: std::os::raw::c_int);
}

static BLAS_INIT: Once = Once::new();

/// Pin OpenBLAS to one thread. Parallelism lives at the realization level,
/// and single-threaded BLAS keeps every reduction order fixed so results are
/// byte-identical for any worker count.
pub(crate) fn single_threaded_blas() {
    BLAS_INIT.call_once(|| unsafe {
        openblas_set_num_threads(1);
    });
}
