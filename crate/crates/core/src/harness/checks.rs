use super::data::sphere_inputs;
use super::streaming::{linear_gradient_profile_sampled, streaming_one_step};
use super::try_parallel_map;
use crate::error::{Error, Result};
use crate::limit::{
    linear_g0_profile, linear_h0_profile, linear_onestep_profile, linear_onestep_profile_rederived,
    G0Profile,
};
use crate::numerics::{Activation, Matrix, RngStream};
use crate::observables::{ntk_exact, ntk_kernel_sum, DEFAULT_NTK_CAP};
use crate::param::{ParamConfig, ReadoutInput, Scheme};
use crate::resnet::{
    backward, backward_fields, finite_diff_grad, forward, gradient_relative_error, init_network,
    Loss, WeightSource,
};

/// Backward pass against central differences for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub scheme: Scheme,
    pub layers_per_block: usize,
    pub train_readin: bool,
    pub train_readout: bool,
    pub max_rel_error: f64,
    /// `ntk_kernel_sum` against `ntk_exact`, relative.
    pub ntk_rel_error: f64,
}

/// Every scheme, each `K` in `ks`, and all four read-in/read-out training
/// combinations, at width `n`, depth `l`.
pub fn gradient_check_grid(
    n: usize,
    l: usize,
    d: usize,
    ks: &[usize],
    act: Activation,
    eps: f64,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    let mut rows = Vec::new();
    let mut xs = RngStream::new(seed, 1);
    let x = sphere_inputs(3, d, &mut xs);
    let y = [0.5, -1.0, 1.5];
    let schemes = [
        Scheme::Sp,
        Scheme::MuP,
        Scheme::MuPSqrtL,
        Scheme::MuPDepthAlpha(1.0),
    ];
    for scheme in schemes {
        for &k in ks {
            for (tin, tout) in [(true, true), (true, false), (false, true), (false, false)] {
                let mut cfg = ParamConfig::new(n, l, d, scheme);
                cfg.activation = act;
                cfg.layers_per_block = k;
                cfg.train_readin = tin;
                cfg.train_readout = tout;
                let net = init_network(&cfg, &RngStream::new(seed, rows.len() as u64))?;
                let t = forward(&net, &x)?;
                let b = backward(&net, &t, &Loss::Mse.delta(&t.f, &y))?;
                let fd = finite_diff_grad(&net, &x, &y, Loss::Mse, eps)?;
                let fields = backward_fields(&net, &t)?;
                let sum = ntk_kernel_sum(&net, &t, &fields)?;
                let exact = ntk_exact(&net, &x, DEFAULT_NTK_CAP)?;
                rows.push(GradCheck {
                    scheme,
                    layers_per_block: k,
                    train_readin: tin,
                    train_readout: tout,
                    max_rel_error: gradient_relative_error(&b.grads, &fd),
                    ntk_rel_error: sum.relative_difference(&exact),
                });
            }
        }
    }
    Ok(rows)
}

/// Deep-linear gradient-kernel profile at initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGProfile {
    pub tau: Vec<f64>,
    /// Seed mean of `G(tau)`.
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub backward_ode: Vec<f64>,
    pub printed: Vec<f64>,
}

impl LinearGProfile {
    /// Largest `|mean / profile - 1|`.
    pub fn max_rel_error(&self, which: G0Profile) -> f64 {
        let p = match which {
            G0Profile::BackwardOde => &self.backward_ode,
            G0Profile::Printed => &self.printed,
        };
        self.mean
            .iter()
            .zip(p)
            .map(|(m, q)| (m / q - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn linear_config(n: usize, l: usize, d: usize) -> ParamConfig {
    let mut cfg = ParamConfig::new(n, l, d, Scheme::MuPSqrtL);
    cfg.activation = Activation::Linear;
    cfg.readout_input = ReadoutInput::Stream;
    cfg.gamma0 = 1.0;
    cfg
}

/// Monte Carlo `G(tau)` of deep linear networks with a frozen read-out at
/// the layers nearest to `taus`. `explicit` regenerates every weight row;
/// otherwise the exact projection sampler is used.
pub fn linear_g_profile(
    n: usize,
    l: usize,
    seeds: usize,
    taus: &[f64],
    explicit: bool,
    master_seed: u64,
    workers: usize,
) -> Result<LinearGProfile> {
    if seeds < 2 {
        return Err(Error::Precondition("seeds must be >= 2".into()));
    }
    let d = 8;
    let mut cfg = linear_config(n, l, d);
    cfg.train_readout = false;
    let x = sphere_inputs(1, d, &mut RngStream::new(master_seed, u64::MAX));
    let profiles = try_parallel_map(workers, seeds, |s| {
        let stream = RngStream::new(master_seed, s as u64);
        if explicit {
            let src = WeightSource::new(&cfg, &stream, l)?;
            let f = super::streaming::streaming_forward(&cfg, &src, &x)?;
            let b = super::streaming::streaming_backward_fields(&cfg, &src, &f)?;
            Ok(b.g
                .iter()
                .map(|g| g.sum_squares() / n as f64)
                .collect::<Vec<_>>())
        } else {
            linear_gradient_profile_sampled(&cfg, &stream)
        }
    })?;
    let mut out = LinearGProfile {
        tau: Vec::new(),
        mean: Vec::new(),
        stderr: Vec::new(),
        backward_ode: Vec::new(),
        printed: Vec::new(),
    };
    for &tau in taus {
        let idx = (tau * l as f64).round() as usize;
        let vals: Vec<f64> = profiles.iter().map(|p| p[idx.min(l)]).collect();
        let (m, v) = crate::observables::scalar_stats(&vals)?;
        let t = idx as f64 / l as f64;
        out.tau.push(t);
        out.mean.push(m);
        out.stderr.push((v / seeds as f64).sqrt());
        out.backward_ode
            .push(linear_g0_profile(t, G0Profile::BackwardOde));
        out.printed.push(linear_g0_profile(t, G0Profile::Printed));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneStepSpec {
    pub width: usize,
    pub depth: usize,
    pub input_dim: usize,
    pub eta0: f64,
    pub gamma0: f64,
    pub target: f64,
    pub train_readin: bool,
    pub seeds: usize,
    pub taus: Vec<f64>,
    pub master_seed: u64,
}

/// Measured and predicted `H1(tau) - H0(tau)` after one step on one
/// normalized sample, averaged over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStepProfile {
    pub tau: Vec<f64>,
    pub h0: Vec<f64>,
    pub h1: Vec<f64>,
    pub measured: Vec<f64>,
    pub stderr: Vec<f64>,
    pub printed: Vec<f64>,
    pub rederived: Vec<f64>,
}

impl OneStepProfile {
    pub fn max_rel_error(&self, rederived: bool) -> f64 {
        let p = if rederived {
            &self.rederived
        } else {
            &self.printed
        };
        self.measured
            .iter()
            .zip(p)
            .map(|(m, q)| ((m - q) / q).abs())
            .fold(0.0, f64::max)
    }
}

/// The closed forms take `y` as the error `y - f(0)` of the step, and
/// `H1(0)` as measured after the step.
pub fn linear_onestep_experiment(spec: &OneStepSpec, workers: usize) -> Result<OneStepProfile> {
    if spec.seeds < 2 {
        return Err(Error::Precondition("seeds must be >= 2".into()));
    }
    let (n, l) = (spec.width, spec.depth);
    let mut cfg = linear_config(n, l, spec.input_dim);
    cfg.gamma0 = spec.gamma0;
    cfg.eta0 = spec.eta0;
    cfg.train_readin = spec.train_readin;
    let idx: Vec<usize> = spec
        .taus
        .iter()
        .map(|t| ((t * l as f64).round() as usize).min(l))
        .collect();
    let x = sphere_inputs(
        1,
        spec.input_dim,
        &mut RngStream::new(spec.master_seed, u64::MAX),
    );
    let per_seed = try_parallel_map(workers, spec.seeds, |s| {
        let stream = RngStream::new(spec.master_seed, s as u64);
        let src = WeightSource::new(&cfg, &stream, l)?;
        let r = streaming_one_step(&cfg, &src, &x, &[spec.target], spec.eta0)?;
        let h = |m: &Matrix| m.sum_squares() / n as f64;
        let delta = spec.target - r.before.f[0];
        let h00 = h(&r.before.h[0]);
        let h10 = h(&r.after[0]);
        let mut rows = Vec::new();
        for &i in &idx {
            let t = i as f64 / l as f64;
            let (a, b) = (h(&r.before.h[i]), h(&r.after[i]));
            let base = linear_h0_profile(h00, t);
            rows.push((
                a,
                b,
                b - a,
                linear_onestep_profile(h10, t, spec.eta0, spec.gamma0, delta) - base,
                linear_onestep_profile_rederived(h10, t, spec.eta0, spec.gamma0, delta) - base,
            ));
        }
        Ok(rows)
    })?;
    let s = spec.seeds as f64;
    let mut out = OneStepProfile {
        tau: idx.iter().map(|&i| i as f64 / l as f64).collect(),
        h0: Vec::new(),
        h1: Vec::new(),
        measured: Vec::new(),
        stderr: Vec::new(),
        printed: Vec::new(),
        rederived: Vec::new(),
    };
    for j in 0..idx.len() {
        let col = |f: &dyn Fn(&(f64, f64, f64, f64, f64)) -> f64| -> Vec<f64> {
            per_seed.iter().map(|r| f(&r[j])).collect()
        };
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / s;
        out.h0.push(mean(col(&|r| r.0)));
        out.h1.push(mean(col(&|r| r.1)));
        let (m, v) = crate::observables::scalar_stats(&col(&|r| r.2))?;
        out.measured.push(m);
        out.stderr.push((v / s).sqrt());
        out.printed.push(mean(col(&|r| r.3)));
        out.rederived.push(mean(col(&|r| r.4)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_grid_passes() {
        let rows = gradient_check_grid(6, 3, 3, &[1, 2], Activation::Tanh, 1e-5, 1).unwrap();
        assert_eq!(rows.len(), 4 * 2 * 4);
        for r in rows {
            assert!(r.max_rel_error < 1e-5, "{r:?}");
            assert!(r.ntk_rel_error < 1e-8, "{r:?}");
        }
    }

    #[test]
    fn linear_profile_paths_agree_roughly() {
        let taus = [0.25, 0.5, 0.75];
        let a = linear_g_profile(64, 16, 40, &taus, true, 3, 1).unwrap();
        let b = linear_g_profile(64, 16, 40, &taus, false, 3, 1).unwrap();
        for i in 0..3 {
            let se = (a.stderr[i].powi(2) + b.stderr[i].powi(2)).sqrt();
            assert!((a.mean[i] - b.mean[i]).abs() < 4.0 * se);
        }
        assert!(b.max_rel_error(G0Profile::BackwardOde) < 0.1);
    }

    #[test]
    fn onestep_reports_every_tau() {
        let spec = OneStepSpec {
            width: 32,
            depth: 8,
            input_dim: 4,
            eta0: 1.0,
            gamma0: 1.0,
            target: 1.0,
            train_readin: true,
            seeds: 3,
            taus: vec![0.25, 0.5, 1.0],
            master_seed: 0,
        };
        let p = linear_onestep_experiment(&spec, 1).unwrap();
        assert_eq!(p.tau, vec![0.25, 0.5, 1.0]);
        assert!(p.measured.iter().all(|v| v.is_finite()));
    }
}
