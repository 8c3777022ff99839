use std::io::Write;

use super::data::Dataset;
use super::streaming::streaming_ntk;
use super::train::{train_network, TrainOptions};
use super::try_parallel_map;
use crate::error::{Error, Result};
use crate::limit::{LayerTimeGrid, LimitKernels};
use crate::numerics::{Activation, Matrix, RngStream};
use crate::observables::{input_kernel, ntk, scalar_stats, KernelMatrix};
use crate::param::{ParamConfig, ReadoutInput, Scheme};
use crate::resnet::{forward, init_network, init_network_coupled, WeightSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Width,
    Depth,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Width => "N",
            Axis::Depth => "L",
        }
    }
}

/// Least-squares line through `(ln size, ln error)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
    /// Indices of points dropped for a non-positive or non-finite error.
    pub dropped: Vec<usize>,
}

pub fn slope_fit(sizes: &[f64], errors: &[f64]) -> Result<SlopeFit> {
    if sizes.len() != errors.len() {
        return Err(Error::Shape(format!(
            "{} sizes but {} errors",
            sizes.len(),
            errors.len()
        )));
    }
    let mut dropped = Vec::new();
    let mut pts = Vec::new();
    for (i, (&s, &e)) in sizes.iter().zip(errors).enumerate() {
        if e > 0.0 && e.is_finite() && s > 0.0 {
            pts.push((s.ln(), e.ln()));
        } else {
            dropped.push(i);
        }
    }
    if pts.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            detail: format!("{} positive errors, dropped {:?}", pts.len(), dropped),
        });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Precondition("all sizes are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    Ok(SlopeFit {
        slope,
        intercept,
        residual: (ss / n).sqrt(),
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub axis: Axis,
    pub sizes: Vec<usize>,
    pub sq_errors: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Expected contribution of ensemble noise to each squared error.
    pub noise_floor: Vec<f64>,
    /// `None` when fewer than three errors are positive.
    pub fit: Option<SlopeFit>,
}

impl ConvergenceReport {
    pub fn new(
        axis: Axis,
        sizes: Vec<usize>,
        sq_errors: Vec<f64>,
        stderr: Vec<f64>,
        noise_floor: Vec<f64>,
    ) -> Result<Self> {
        if sizes.len() != sq_errors.len()
            || sizes.len() != stderr.len()
            || sizes.len() != noise_floor.len()
        {
            return Err(Error::Shape("report columns differ in length".into()));
        }
        if sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Precondition(format!(
                "sizes {sizes:?} are not strictly increasing"
            )));
        }
        if sq_errors.iter().any(|&e| !(e >= 0.0)) {
            return Err(Error::Precondition("squared errors must be >= 0".into()));
        }
        let xs: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
        let fit = slope_fit(&xs, &sq_errors).ok();
        Ok(Self {
            axis,
            sizes,
            sq_errors,
            stderr,
            noise_floor,
            fit,
        })
    }

    pub fn slope(&self) -> Option<f64> {
        self.fit.as_ref().map(|f| f.slope)
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "axis,size,sq_error,stderr")?;
        self.write_rows(&mut out)
    }

    /// Data rows only, for concatenating several reports under one header.
    pub fn write_rows(&self, mut out: impl Write) -> Result<()> {
        for i in 0..self.sizes.len() {
            writeln!(
                out,
                "{},{},{:.12e},{:.12e}",
                self.axis.name(),
                self.sizes[i],
                self.sq_errors[i],
                self.stderr[i]
            )?;
        }
        Ok(())
    }
}

/// Squared error `mean_j (mean_e v_e[j] - target[j])^2` of the ensemble
/// mean, with its jackknife standard error and the noise floor
/// `mean_j Var_e(v[j]) / E`.
pub fn jackknife_sq_error(samples: &[Vec<f64>], target: &[f64]) -> Result<(f64, f64, f64)> {
    let e = samples.len();
    if e < 2 {
        return Err(Error::Precondition(
            "need at least 2 ensemble members".into(),
        ));
    }
    let m = target.len();
    if samples.iter().any(|s| s.len() != m) || m == 0 {
        return Err(Error::Shape("ensemble members differ in length".into()));
    }
    let ef = e as f64;
    let sum: Vec<f64> = (0..m)
        .map(|j| samples.iter().map(|s| s[j]).sum::<f64>())
        .collect();
    let sq = |mean: &dyn Fn(usize) -> f64| {
        (0..m).map(|j| (mean(j) - target[j]).powi(2)).sum::<f64>() / m as f64
    };
    let full = sq(&|j| sum[j] / ef);
    let loo: Vec<f64> = samples
        .iter()
        .map(|s| sq(&|j| (sum[j] - s[j]) / (ef - 1.0)))
        .collect();
    let lm = loo.iter().sum::<f64>() / ef;
    let var = (ef - 1.0) / ef * loo.iter().map(|v| (v - lm).powi(2)).sum::<f64>();
    let floor = (0..m)
        .map(|j| {
            let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
            scalar_stats(&col).map(|(_, v)| v / ef)
        })
        .sum::<Result<f64>>()?
        / m as f64;
    Ok((full, var.sqrt(), floor))
}

fn upper(k: &KernelMatrix) -> Vec<f64> {
    let p = k.size();
    let mut out = Vec::with_capacity(p * (p + 1) / 2);
    for i in 0..p {
        for j in i..p {
            out.push(k.get(i, j));
        }
    }
    out
}

fn init_ntk(cfg: &ParamConfig, stream: &RngStream, x: &Matrix) -> Result<KernelMatrix> {
    if cfg.layers_per_block == 1 {
        let src = WeightSource::new(cfg, stream, cfg.depth)?;
        streaming_ntk(cfg, &src, x)
    } else {
        ntk(&init_network(cfg, stream)?, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NtkInitSpec {
    pub activation: Activation,
    pub width: usize,
    pub depths: Vec<usize>,
    pub ensembles: usize,
    /// Probe inputs, rows normalized to `|x|^2 = D`.
    pub probe: Matrix,
    pub grid_steps: usize,
    pub master_seed: u64,
}

impl NtkInitSpec {
    /// MuPSqrtL with frozen read-in and read-out and a read-out fed by the
    /// residual stream, which is the setting the lazy-limit kernels
    /// describe.
    pub fn config(&self, depth: usize) -> ParamConfig {
        let mut cfg = ParamConfig::new(self.width, depth, self.probe.cols(), Scheme::MuPSqrtL);
        cfg.activation = self.activation;
        cfg.gamma0 = 1.0;
        cfg.train_readin = false;
        cfg.train_readout = false;
        cfg.readout_input = ReadoutInput::Stream;
        cfg
    }
}

/// Ensemble-mean NTK at initialization against the lazy limit, for each
/// depth. Member `e` at depth index `d` draws from `(master_seed, d E + e)`.
pub fn ntk_init_convergence(spec: &NtkInitSpec, workers: usize) -> Result<ConvergenceReport> {
    let e = spec.ensembles;
    if e < 2 {
        return Err(Error::Precondition("ensembles must be >= 2".into()));
    }
    let limit = LimitKernels::solve(
        spec.activation,
        &input_kernel(&spec.probe),
        LayerTimeGrid::new(spec.grid_steps)?,
    )?;
    let target = upper(&limit.ntk);
    let kernels = try_parallel_map(workers, spec.depths.len() * e, |task| {
        let cfg = spec.config(spec.depths[task / e]);
        let k = init_ntk(
            &cfg,
            &RngStream::new(spec.master_seed, task as u64),
            &spec.probe,
        )?;
        Ok(upper(&k))
    })?;
    let mut sq = Vec::new();
    let mut se = Vec::new();
    let mut floor = Vec::new();
    for chunk in kernels.chunks(e) {
        let (a, b, c) = jackknife_sq_error(chunk, &target)?;
        sq.push(a);
        se.push(b);
        floor.push(c);
    }
    ConvergenceReport::new(Axis::Depth, spec.depths.clone(), sq, se, floor)
}

/// Across-seed variance of the initial `K(x, x)` for the first probe row,
/// as a function of width or depth. `sq_errors` holds the variances.
pub fn fluctuation_scaling(
    base: &ParamConfig,
    axis: Axis,
    sizes: &[usize],
    seeds: usize,
    x: &Matrix,
    master_seed: u64,
    workers: usize,
) -> Result<ConvergenceReport> {
    if seeds < 2 {
        return Err(Error::Precondition("seeds must be >= 2".into()));
    }
    let x0 = x.submatrix_rows(0, 1);
    let values = try_parallel_map(workers, sizes.len() * seeds, |task| {
        let mut cfg = base.clone();
        match axis {
            Axis::Width => cfg.width = sizes[task / seeds],
            Axis::Depth => cfg.depth = sizes[task / seeds],
        }
        let k = init_ntk(&cfg, &RngStream::new(master_seed, task as u64), &x0)?;
        Ok(k.get(0, 0))
    })?;
    let mut var = Vec::new();
    let mut se = Vec::new();
    for chunk in values.chunks(seeds) {
        let (_, v) = scalar_stats(chunk)?;
        var.push(v);
        se.push(v * (2.0 / (seeds as f64 - 1.0)).sqrt());
    }
    let zeros = vec![0.0; sizes.len()];
    ConvergenceReport::new(axis, sizes.to_vec(), var, se, zeros)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthConvergenceSpec {
    /// Template; width and depth are set per cell.
    pub base: ParamConfig,
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    /// `(N*, L*)`.
    pub proxy: (usize, usize),
    pub proxy_ensembles: usize,
    pub ensembles: usize,
    pub train: TrainOptions,
    /// Held-out inputs, fixed across all cells.
    pub probe: Matrix,
    pub master_seed: u64,
}

impl DepthConvergenceSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        if self.ensembles < 2 || self.proxy_ensembles < self.ensembles {
            return bad("need ensembles >= 2 and a proxy member for every seed".into());
        }
        if self.base.layers_per_block != 1 {
            return bad("depth coupling needs one layer per block".into());
        }
        let (pn, pl) = self.proxy;
        for &n in &self.widths {
            if n > pn {
                return bad(format!("width {n} exceeds proxy width {pn}"));
            }
        }
        for &l in &self.depths {
            if l > pl || pl % l != 0 {
                return bad(format!("depth {l} must divide proxy depth {pl}"));
            }
        }
        Ok(())
    }
}

/// Trained-predictor convergence towards the proxy.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthConvergence {
    /// Ensemble-mean proxy logits on the probe.
    pub proxy_logits: Vec<f64>,
    /// Per width: `E[(f_{N,L} - f*)^2]` over seeds and probe inputs, seed
    /// `e` against proxy member `e`.
    pub per_seed: Vec<(usize, ConvergenceReport)>,
    /// Per width: squared ensemble mean of the paired differences.
    pub ensemble: Vec<(usize, ConvergenceReport)>,
}

/// Members share weights through the keyed, depth-coupled initialization
/// (seed `e` uses stream `(master_seed, e)` at every size, with the proxy
/// depth as the reference), and see the same minibatch order. Errors pair
/// seed `e` with proxy member `e`, so the seed-to-seed spread of the proxy
/// itself cancels.
pub fn depth_convergence_experiment(
    spec: &DepthConvergenceSpec,
    data: &Dataset,
    workers: usize,
) -> Result<DepthConvergence> {
    spec.validate()?;
    let (pn, pl) = spec.proxy;
    let mut jobs: Vec<(usize, usize, usize)> =
        (0..spec.proxy_ensembles).map(|e| (pn, pl, e)).collect();
    for &n in &spec.widths {
        for &l in &spec.depths {
            for e in 0..spec.ensembles {
                jobs.push((n, l, e));
            }
        }
    }
    let logits = try_parallel_map(workers, jobs.len(), |task| {
        let (n, l, e) = jobs[task];
        let mut cfg = spec.base.clone();
        cfg.width = n;
        cfg.depth = l;
        let stream = RngStream::new(spec.master_seed, e as u64);
        let net = init_network_coupled(&cfg, &stream.substream(0), pl)?;
        let r = train_network(net, data, &spec.train, &stream)?;
        if r.diverged {
            return Err(Error::Diverged(format!("N={n} L={l} seed {e}")));
        }
        let t = forward(&r.network, &spec.probe)?;
        Ok(t.f)
    })?;
    let (proxy, rest) = logits.split_at(spec.proxy_ensembles);
    let m = spec.probe.rows() as f64;
    let proxy_logits: Vec<f64> = (0..spec.probe.rows())
        .map(|j| proxy.iter().map(|f| f[j]).sum::<f64>() / proxy.len() as f64)
        .collect();
    let mut per_seed = Vec::new();
    let mut ensemble = Vec::new();
    let e = spec.ensembles;
    let zero = vec![0.0; spec.probe.rows()];
    for (wi, &n) in spec.widths.iter().enumerate() {
        let (mut sq, mut se) = (Vec::new(), Vec::new());
        let (mut esq, mut ese, mut efl) = (Vec::new(), Vec::new(), Vec::new());
        for di in 0..spec.depths.len() {
            let base = (wi * spec.depths.len() + di) * e;
            let diffs: Vec<Vec<f64>> = rest[base..base + e]
                .iter()
                .zip(proxy)
                .map(|(f, p)| f.iter().zip(p).map(|(a, b)| a - b).collect())
                .collect();
            let errs: Vec<f64> = diffs
                .iter()
                .map(|d| d.iter().map(|v| v * v).sum::<f64>() / m)
                .collect();
            let (mean, var) = scalar_stats(&errs)?;
            sq.push(mean);
            se.push((var / e as f64).sqrt());
            let (a, b, c) = jackknife_sq_error(&diffs, &zero)?;
            esq.push(a);
            ese.push(b);
            efl.push(c);
        }
        let zeros = vec![0.0; sq.len()];
        per_seed.push((
            n,
            ConvergenceReport::new(Axis::Depth, spec.depths.clone(), sq, se, zeros)?,
        ));
        ensemble.push((
            n,
            ConvergenceReport::new(Axis::Depth, spec.depths.clone(), esq, ese, efl)?,
        ));
    }
    Ok(DepthConvergence {
        proxy_logits,
        per_seed,
        ensemble,
    })
}
