use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use depthlab::harness::{
    depth_convergence_experiment, gradient_check_grid, linear_onestep_experiment,
    lr_transfer_experiment, ntk_init_convergence, run_training, sphere_inputs, synth_dataset,
    write_sweep_csv, ConvergenceReport, Dataset, DepthConvergenceSpec, NtkInitSpec, OneStepSpec,
    Teacher, TrainOptions, TransferSpec,
};
use depthlab::limit::{LayerTimeGrid, LimitKernels};
use depthlab::numerics::{Activation, Matrix, RngStream};
use depthlab::observables::input_kernel;
use depthlab::optim::{OptimizerSpec, Schedule, ScheduleKind};
use depthlab::param::{ParamConfig, ReadoutInput, Scheme};
use depthlab::resnet::save_checkpoint;
use depthlab::{Error, Result};

use crate::config::RunConfig;

pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const NTK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Default)]
pub struct Outcome {
    pub diverged: bool,
    pub check_failed: bool,
}

impl Outcome {
    pub fn code(&self) -> u8 {
        if self.check_failed {
            crate::EXIT_FAILED
        } else if self.diverged {
            crate::EXIT_DIVERGED
        } else {
            0
        }
    }
}

struct Output<'a> {
    dir: &'a Path,
    summary: Vec<String>,
}

impl<'a> Output<'a> {
    fn file(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn write(&self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = self.file(name)?;
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn line(&mut self, s: String) {
        self.summary.push(s);
    }

    fn finish(&self) -> Result<()> {
        let mut text = self.summary.join("\n");
        text.push('\n');
        std::fs::write(self.dir.join("summary.txt"), &text)?;
        print!("{text}");
        Ok(())
    }
}

pub fn execute(
    name: &str,
    cfg: &RunConfig,
    original: Option<&str>,
    dir: &Path,
    workers: usize,
) -> Result<Outcome> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), cfg.render())?;
    if let Some(text) = original {
        std::fs::write(dir.join("config.input.txt"), text)?;
    }
    let mut out = Output {
        dir,
        summary: vec![format!("command = {name}")],
    };
    let outcome = match name {
        "train" => train(cfg, &mut out)?,
        "sweep" => sweep(cfg, &mut out, workers)?,
        "ntk-init" => ntk_init(cfg, &mut out, workers)?,
        "limit-ode" => limit_ode(cfg, &mut out)?,
        "linear-onestep" => linear_onestep(cfg, &mut out, workers)?,
        "converge" => converge(cfg, &mut out, workers)?,
        "gradcheck" => gradcheck(cfg, &mut out)?,
        other => return Err(Error::Config(format!("unknown subcommand '{other}'"))),
    };
    out.finish()?;
    Ok(outcome)
}

fn model_config(c: &RunConfig) -> Result<ParamConfig> {
    let scheme = Scheme::parse(c.str("scheme")?, Some(c.f64("alpha")?))?;
    let mut p = ParamConfig::new(
        c.usize("width")?,
        c.usize("depth")?,
        c.usize("input_dim")?,
        scheme,
    );
    p.layers_per_block = c.usize("layers_per_block")?;
    p.activation = Activation::parse(c.str("act")?)?;
    p.gamma0 = c.f64("gamma0")?;
    p.eta0 = c.f64("eta0")?;
    p.zero_block_readout = c.bool("zero_block_readout")?;
    p.branch_multiplier = c.f64("branch_multiplier")?;
    p.train_readin = c.bool("train_readin")?;
    p.train_readout = c.bool("train_readout")?;
    p.readout_input = match c.str("readout_input")? {
        "activation" => ReadoutInput::Activation,
        "stream" => ReadoutInput::Stream,
        v => {
            return Err(Error::Config(format!(
                "key 'readout_input': '{v}' is not activation or stream"
            )))
        }
    };
    p.validate()?;
    Ok(p)
}

fn train_options(c: &RunConfig) -> Result<TrainOptions> {
    let steps = c.u64("steps")?;
    let total = match c.u64("total_steps")? {
        0 => steps,
        t => t,
    };
    let optimizer = OptimizerSpec {
        schedule: Schedule {
            kind: ScheduleKind::parse(c.str("schedule")?)?,
            target: c.f64("eta0")?,
            warmup_steps: c.u64("warmup_steps")?,
            total_steps: total,
        },
        momentum: c.f64("momentum")?,
        weight_decay: c.f64("weight_decay")?,
    };
    optimizer.validate()?;
    let mut o = TrainOptions::new(optimizer, steps, c.usize("batch")?);
    o.record_every = c.u64("record_every")?;
    o.eval_size = c.usize("eval_size")?;
    o.ntk_every = c.u64("ntk_every")?;
    o.ntk_probe = c.usize("ntk_probe")?;
    Ok(o)
}

fn dataset(c: &RunConfig) -> Result<Dataset> {
    let teacher = Teacher::parse(c.str("teacher")?)?;
    synth_dataset(
        c.usize("input_dim")?,
        c.usize("samples")?,
        teacher,
        c.f64("noise")?,
        &RngStream::new(c.u64("data_seed")?, 0),
    )
}

/// Probe inputs independent of the training set.
fn probe(c: &RunConfig) -> Result<Matrix> {
    let seed = match c.u64("data_seed") {
        Ok(s) => s,
        Err(_) => c.u64("seed")?,
    };
    Ok(sphere_inputs(
        c.usize("probe_points")?,
        c.usize("input_dim")?,
        &mut RngStream::new(seed, 1),
    ))
}

fn fmt(v: f64) -> String {
    format!("{v:.12e}")
}

fn opt_fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), fmt)
}

fn train(c: &RunConfig, out: &mut Output) -> Result<Outcome> {
    let cfg = model_config(c)?;
    let data = dataset(c)?;
    let opts = train_options(c)?;
    let r = run_training(&cfg, &data, &opts, &RngStream::new(c.u64("seed")?, 0))?;
    out.write("loss.csv", |w| write_sweep_csv(&r.records, w))?;
    out.write("ntk.csv", |w| {
        writeln!(w, "step,i,j,value")?;
        for (step, k) in &r.kernels {
            for i in 0..k.size() {
                for j in i..k.size() {
                    writeln!(w, "{step},{i},{j},{}", fmt(k.get(i, j)))?;
                }
            }
        }
        Ok(())
    })?;
    out.write("model.ckpt", |w| save_checkpoint(&r.network, w))?;
    let last = r.records.last().map_or(0, |x| x.step);
    out.line(format!("initial_loss = {}", fmt(r.records[0].train_loss)));
    out.line(format!("final_loss = {}", fmt(r.final_loss)));
    out.line(format!("steps_run = {last}"));
    out.line(format!("diverged = {}", r.diverged));
    Ok(Outcome {
        diverged: r.diverged,
        ..Outcome::default()
    })
}

fn lr_grid(c: &RunConfig) -> Result<Vec<f64>> {
    let (lo, hi) = (c.f64("lr_log2_min")?, c.f64("lr_log2_max")?);
    let n = c.usize("lr_points")?;
    if n == 0 || (n > 1 && !(hi > lo)) {
        return Err(Error::Config(
            "key 'lr_points': need lr_points >= 1 and lr_log2_max > lr_log2_min".into(),
        ));
    }
    Ok((0..n)
        .map(|i| {
            let t = if n == 1 {
                0.0
            } else {
                i as f64 / (n - 1) as f64
            };
            (lo + t * (hi - lo)).exp2()
        })
        .collect())
}

fn sweep(c: &RunConfig, out: &mut Output, workers: usize) -> Result<Outcome> {
    let base = model_config(c)?;
    let alpha = c.f64("alpha")?;
    let schemes = c
        .list::<String>("schemes")?
        .iter()
        .map(|s| Scheme::parse(s, Some(alpha)))
        .collect::<Result<Vec<_>>>()?;
    let widths = c.list::<usize>("widths")?;
    let depths = c.list::<usize>("depths")?;
    let cells = widths
        .iter()
        .flat_map(|&n| depths.iter().map(move |&l| (n, l)))
        .collect();
    let spec = TransferSpec {
        base,
        schemes,
        cells,
        lrs: lr_grid(c)?,
        seeds: c.usize("seeds")?,
        train: train_options(c)?,
        master_seed: c.u64("seed")?,
    };
    let data = dataset(c)?;
    let r = lr_transfer_experiment(&spec, &data, workers)?;
    out.write("sweep.csv", |w| write_sweep_csv(&r.records, w))?;
    out.write("optima.csv", |w| {
        writeln!(w, "scheme,N,L,lr_index,lr,mean_loss,diverged_runs,optimal")?;
        for cell in &r.cells {
            for (i, (m, d)) in cell.mean_loss.iter().zip(&cell.diverged_runs).enumerate() {
                writeln!(
                    w,
                    "{},{},{},{i},{:e},{},{d},{}",
                    cell.scheme,
                    cell.n,
                    cell.l,
                    spec.lrs[i],
                    opt_fmt(*m),
                    u8::from(cell.optimum == Some(i))
                )?;
            }
        }
        Ok(())
    })?;
    out.line("optimal learning rates (scheme N L lr)".into());
    for cell in &r.cells {
        let lr = cell
            .optimum
            .map_or_else(|| "diverged".to_string(), |i| format!("{:e}", spec.lrs[i]));
        out.line(format!("  {} {} {} {lr}", cell.scheme, cell.n, cell.l));
    }
    for v in &r.verdicts {
        let shift = v
            .max_shift
            .map_or_else(|| "undefined".to_string(), |s| s.to_string());
        out.line(format!(
            "{}: max_index_shift = {shift}, undefined_cells = {}, transfers = {}",
            v.scheme,
            v.undefined_cells,
            v.transfers()
        ));
    }
    Ok(Outcome {
        diverged: r.cells.iter().all(|c| c.optimum.is_none()),
        ..Outcome::default()
    })
}

fn write_report(out: &Output, name: &str, r: &ConvergenceReport) -> Result<()> {
    out.write(name, |w| {
        writeln!(w, "axis,size,sq_error,stderr,noise_floor")?;
        for i in 0..r.sizes.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.axis.name(),
                r.sizes[i],
                fmt(r.sq_errors[i]),
                fmt(r.stderr[i]),
                fmt(r.noise_floor.get(i).copied().unwrap_or(f64::NAN))
            )?;
        }
        Ok(())
    })
}

fn slope_line(label: &str, r: &ConvergenceReport) -> String {
    match &r.fit {
        Some(f) => format!(
            "{label}: slope = {:.4}, rms_log_residual = {:.4}",
            f.slope, f.residual
        ),
        None => format!("{label}: slope = undefined"),
    }
}

fn ntk_init(c: &RunConfig, out: &mut Output, workers: usize) -> Result<Outcome> {
    let spec = NtkInitSpec {
        activation: Activation::parse(c.str("act")?)?,
        width: c.usize("width")?,
        depths: c.list("depths")?,
        ensembles: c.usize("ensembles")?,
        probe: probe(c)?,
        grid_steps: c.usize("grid_steps")?,
        master_seed: c.u64("seed")?,
    };
    let r = ntk_init_convergence(&spec, workers)?;
    write_report(out, "ntk_init.csv", &r)?;
    for (l, e) in r.sizes.iter().zip(&r.sq_errors) {
        out.line(format!("L = {l}: sq_error = {}", fmt(*e)));
    }
    out.line(slope_line("depth", &r));
    Ok(Outcome::default())
}

fn limit_ode(c: &RunConfig, out: &mut Output) -> Result<Outcome> {
    let act = Activation::parse(c.str("act")?)?;
    let x = probe(c)?;
    let lk = LimitKernels::solve(
        act,
        &input_kernel(&x),
        LayerTimeGrid::new(c.usize("grid_steps")?)?,
    )?;
    out.write("limit.csv", |w| lk.write_csv(w))?;
    out.write("limit_ntk.csv", |w| lk.ntk.write_csv(w))?;
    let last = lk.h.len() - 1;
    let (h0, h1) = (lk.h[0].get(0, 0), lk.h[last].get(0, 0));
    out.line(format!("activation = {}", act.name()));
    out.line(format!("H(0) = {h0:.12}"));
    out.line(format!("H(1) = {h1:.12}"));
    out.line(format!("H(1)/H(0) = {:.12}", h1 / h0));
    out.line(format!("G(0) = {:.12}", lk.g[0].get(0, 0)));
    out.line(format!("NTK(0,0) = {:.12}", lk.ntk.get(0, 0)));
    Ok(Outcome::default())
}

fn linear_onestep(c: &RunConfig, out: &mut Output, workers: usize) -> Result<Outcome> {
    let spec = OneStepSpec {
        width: c.usize("width")?,
        depth: c.usize("depth")?,
        input_dim: c.usize("input_dim")?,
        eta0: c.f64("eta0")?,
        gamma0: c.f64("gamma0")?,
        target: c.f64("target")?,
        train_readin: c.bool("train_readin")?,
        seeds: c.usize("seeds")?,
        taus: c.list("taus")?,
        master_seed: c.u64("seed")?,
    };
    let p = linear_onestep_experiment(&spec, workers)?;
    out.write("onestep.csv", |w| {
        writeln!(w, "tau,H0,H1,measured,stderr,printed,rederived")?;
        for i in 0..p.tau.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                p.tau[i],
                fmt(p.h0[i]),
                fmt(p.h1[i]),
                fmt(p.measured[i]),
                fmt(p.stderr[i]),
                fmt(p.printed[i]),
                fmt(p.rederived[i])
            )?;
        }
        Ok(())
    })?;
    out.line(format!(
        "max_rel_error_printed = {:.6}",
        p.max_rel_error(false)
    ));
    out.line(format!(
        "max_rel_error_rederived = {:.6}",
        p.max_rel_error(true)
    ));
    Ok(Outcome::default())
}

fn converge(c: &RunConfig, out: &mut Output, workers: usize) -> Result<Outcome> {
    let spec = DepthConvergenceSpec {
        base: model_config(c)?,
        widths: c.list("widths")?,
        depths: c.list("depths")?,
        proxy: (c.usize("proxy_width")?, c.usize("proxy_depth")?),
        proxy_ensembles: c.usize("proxy_ensembles")?,
        ensembles: c.usize("ensembles")?,
        train: train_options(c)?,
        probe: probe(c)?,
        master_seed: c.u64("seed")?,
    };
    let data = dataset(c)?;
    let r = depth_convergence_experiment(&spec, &data, workers)?;
    out.write("proxy.csv", |w| {
        writeln!(w, "probe,logit")?;
        for (i, v) in r.proxy_logits.iter().enumerate() {
            writeln!(w, "{i},{}", fmt(*v))?;
        }
        Ok(())
    })?;
    for ((n, a), (_, b)) in r.per_seed.iter().zip(&r.ensemble) {
        write_report(out, &format!("converge_seed_N{n}.csv"), a)?;
        write_report(out, &format!("converge_ensemble_N{n}.csv"), b)?;
        out.line(slope_line(&format!("N = {n} per-seed"), a));
        out.line(slope_line(&format!("N = {n} ensemble"), b));
    }
    Ok(Outcome::default())
}

fn gradcheck(c: &RunConfig, out: &mut Output) -> Result<Outcome> {
    let rows = gradient_check_grid(
        c.usize("width")?,
        c.usize("depth")?,
        c.usize("input_dim")?,
        &c.list::<usize>("ks")?,
        Activation::parse(c.str("act")?)?,
        c.f64("eps")?,
        c.u64("seed")?,
    )?;
    out.write("gradcheck.csv", |w| {
        writeln!(
            w,
            "scheme,K,train_readin,train_readout,max_rel_error,ntk_rel_error"
        )?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.scheme,
                r.layers_per_block,
                u8::from(r.train_readin),
                u8::from(r.train_readout),
                fmt(r.max_rel_error),
                fmt(r.ntk_rel_error)
            )?;
        }
        Ok(())
    })?;
    let grad = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let ntk = rows.iter().map(|r| r.ntk_rel_error).fold(0.0, f64::max);
    out.line(format!("configurations = {}", rows.len()));
    out.line(format!("max relative gradient error = {grad:.3e}"));
    out.line(format!("max relative NTK error = {ntk:.3e}"));
    Ok(Outcome {
        check_failed: !(grad < GRAD_TOLERANCE && ntk < NTK_TOLERANCE),
        ..Outcome::default()
    })
}
