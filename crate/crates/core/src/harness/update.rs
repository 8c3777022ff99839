use super::streaming::streaming_one_step;
use super::try_parallel_map;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};
use crate::observables::scalar_stats;
use crate::optim::{sgd_step, Schedule};
use crate::param::ParamConfig;
use crate::resnet::{backward, forward, init_network, Loss, WeightSource};

/// Size of one SGD step from initialization, averaged over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    /// `|h_after - h_before| / |h_before|` at layer `L/2`, over the batch.
    pub feature_change: f64,
    /// Mean `|f_after - f_before|` over the batch.
    pub output_change: f64,
    pub feature_stderr: f64,
    pub output_stderr: f64,
}

fn frob_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// One full-batch step on `(x, y)` with base rate `eta0`, seeds drawn from
/// `(master_seed, s)`.
pub fn one_step_update_stats(
    cfg: &ParamConfig,
    x: &Matrix,
    y: &[f64],
    eta0: f64,
    seeds: usize,
    master_seed: u64,
    workers: usize,
) -> Result<UpdateStats> {
    if seeds < 2 {
        return Err(Error::Precondition("seeds must be >= 2".into()));
    }
    let mid = cfg.depth / 2;
    let runs = try_parallel_map(workers, seeds, |s| {
        let stream = RngStream::new(master_seed, s as u64);
        let (h0, h1, f0, f1) = if cfg.layers_per_block == 1 {
            let src = WeightSource::new(cfg, &stream, cfg.depth)?;
            let r = streaming_one_step(cfg, &src, x, y, eta0)?;
            (
                r.before.h[mid].clone(),
                r.after[mid].clone(),
                r.before.f,
                r.f_after,
            )
        } else {
            let mut net = init_network(cfg, &stream)?;
            let t = forward(&net, x)?;
            let b = backward(&net, &t, &Loss::Mse.delta(&t.f, y))?;
            sgd_step(&mut net, &b.grads, &Schedule::constant(eta0), 0)?;
            let a = forward(&net, x)?;
            (t.h[mid].clone(), a.h[mid].clone(), t.f, a.f)
        };
        let feat = frob_diff(&h1, &h0) / h0.sum_squares().sqrt();
        let out = f0.iter().zip(&f1).map(|(a, b)| (a - b).abs()).sum::<f64>() / f0.len() as f64;
        Ok((feat, out))
    })?;
    let feats: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let outs: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let (fm, fv) = scalar_stats(&feats)?;
    let (om, ov) = scalar_stats(&outs)?;
    let n = seeds as f64;
    Ok(UpdateStats {
        feature_change: fm,
        output_change: om,
        feature_stderr: (fv / n).sqrt(),
        output_stderr: (ov / n).sqrt(),
    })
}
