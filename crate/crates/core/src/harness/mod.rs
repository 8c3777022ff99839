//! Synthetic data, training runs, transfer sweeps and convergence-rate
//! experiments.
//!
//! Every experiment splits into independent tasks keyed by a cell index.
//! Each task derives its streams from `(master_seed, cell index)` only, and
//! results are collected in index order, so outputs do not depend on the
//! worker count.

mod checks;
mod convergence;
mod data;
mod streaming;
mod train;
mod transfer;
mod update;

pub use checks::{
    gradient_check_grid, linear_g_profile, linear_onestep_experiment, GradCheck, LinearGProfile,
    OneStepProfile, OneStepSpec,
};
pub use convergence::{
    depth_convergence_experiment, fluctuation_scaling, jackknife_sq_error, ntk_init_convergence,
    slope_fit, Axis, ConvergenceReport, DepthConvergence, DepthConvergenceSpec, NtkInitSpec,
    SlopeFit,
};
pub use data::{sphere_inputs, synth_dataset, Dataset, Teacher, TeacherWeights, TEACHER_WIDTH};
pub use streaming::{
    linear_gradient_profile_sampled, streaming_backward_fields, streaming_forward, streaming_ntk,
    streaming_one_step, OneStep,
};
pub use train::{
    run_training, write_sweep_csv, SweepRecord, TrainOptions, TrainResult, DEFAULT_EVAL_SIZE,
};
pub use transfer::{
    lr_transfer_experiment, optimal_indices, TransferCell, TransferResult, TransferSpec,
    TransferVerdict,
};
pub use update::{one_step_update_stats, UpdateStats};

use crate::error::{Error, Result};
use rayon::prelude::*;

/// `f(0), .., f(count - 1)` on a pool of `workers` threads, in index order.
pub fn parallel_map<T, F>(workers: usize, count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if workers <= 1 {
        return Ok((0..count).map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(|| (0..count).into_par_iter().map(f).collect()))
}

/// As [`parallel_map`] for fallible tasks; the first error in index order wins.
pub fn try_parallel_map<T, F>(workers: usize, count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    parallel_map(workers, count, f)?.into_iter().collect()
}
