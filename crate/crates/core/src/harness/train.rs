use std::io::Write;

use rand::seq::SliceRandom;

use super::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::observables::{ntk, KernelMatrix};
use crate::optim::OptimizerSpec;
use crate::param::{ParamConfig, Scheme};
use crate::resnet::{backward, forward, init_network, Loss, Network};

/// Samples used to report `train_loss`.
pub const DEFAULT_EVAL_SIZE: usize = 256;

/// One row of the sweep CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub scheme: Scheme,
    pub n: usize,
    pub l: usize,
    pub k: usize,
    pub lr: f64,
    pub gamma0: f64,
    pub seed: u64,
    pub step: u64,
    /// Last finite loss when `diverged` is set.
    pub train_loss: f64,
    pub diverged: bool,
}

impl SweepRecord {
    fn scheme_label(&self) -> String {
        match self.scheme {
            Scheme::MuPDepthAlpha(a) => format!("{}:{a}", self.scheme.name()),
            s => s.name().to_string(),
        }
    }
}

pub fn write_sweep_csv(records: &[SweepRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "scheme,N,L,K,lr,gamma0,seed,step,train_loss,diverged")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{:e},{},{},{},{:.12e},{}",
            r.scheme_label(),
            r.n,
            r.l,
            r.k,
            r.lr,
            r.gamma0,
            r.seed,
            r.step,
            r.train_loss,
            u8::from(r.diverged)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub optimizer: OptimizerSpec,
    pub steps: u64,
    pub batch: usize,
    /// Record the loss every this many steps (and at the last step). The
    /// loss is only evaluated at record points.
    pub record_every: u64,
    /// The loss is measured on the first `eval_size` samples.
    pub eval_size: usize,
    /// NTK checkpoint period on the first `ntk_probe` samples; 0 disables.
    pub ntk_every: u64,
    pub ntk_probe: usize,
}

impl TrainOptions {
    pub fn new(optimizer: OptimizerSpec, steps: u64, batch: usize) -> Self {
        Self {
            optimizer,
            steps,
            batch,
            record_every: 1,
            eval_size: DEFAULT_EVAL_SIZE,
            ntk_every: 0,
            ntk_probe: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub records: Vec<SweepRecord>,
    pub network: Network,
    pub final_loss: f64,
    pub diverged: bool,
    /// `(step, NTK)` checkpoints.
    pub kernels: Vec<(u64, KernelMatrix)>,
}

struct Batches {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    stream: RngStream,
}

impl Batches {
    fn new(p: usize, stream: RngStream) -> Self {
        Self {
            order: (0..p).collect(),
            pos: usize::MAX,
            epoch: 0,
            stream,
        }
    }

    /// Without replacement within an epoch; a short tail is dropped.
    fn next(&mut self, batch: usize) -> &[usize] {
        if self.pos == usize::MAX || self.pos + batch > self.order.len() {
            self.order.sort_unstable();
            let mut rng = self.stream.substream(self.epoch);
            self.order.shuffle(&mut rng);
            self.epoch += 1;
            self.pos = 0;
        }
        let s = &self.order[self.pos..self.pos + batch];
        self.pos += batch;
        s
    }
}

/// Minibatch training from a fresh initialization drawn from `stream`.
/// The `seed` column of the records is `stream.stream_index()`.
pub fn run_training(
    cfg: &ParamConfig,
    data: &Dataset,
    opts: &TrainOptions,
    stream: &RngStream,
) -> Result<TrainResult> {
    let net = init_network(cfg, &stream.substream(0))?;
    train_network(net, data, opts, stream)
}

/// As [`run_training`] from a given initialization.
pub fn train_network(
    mut net: Network,
    data: &Dataset,
    opts: &TrainOptions,
    stream: &RngStream,
) -> Result<TrainResult> {
    opts.optimizer.validate()?;
    let cfg = net.cfg().clone();
    if opts.batch == 0 || opts.batch > data.len() {
        return Err(Error::Config(format!(
            "batch size {} must be in [1, {}]",
            opts.batch,
            data.len()
        )));
    }
    if data.dim() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "dataset dimension {} differs from input_dim {}",
            data.dim(),
            cfg.input_dim
        )));
    }
    let record_every = opts.record_every.max(1);
    let eval_idx: Vec<usize> = (0..opts.eval_size.clamp(1, data.len())).collect();
    let (ex, ey) = data.batch(&eval_idx);
    let probe: Vec<usize> = (0..opts.ntk_probe.clamp(1, data.len())).collect();
    let (px, _) = data.batch(&probe);
    let template = SweepRecord {
        scheme: cfg.scheme,
        n: cfg.width,
        l: cfg.depth,
        k: cfg.layers_per_block,
        lr: opts.optimizer.schedule.target,
        gamma0: cfg.gamma0,
        seed: stream.stream_index(),
        step: 0,
        train_loss: f64::NAN,
        diverged: false,
    };
    let eval = |net: &Network| -> Option<f64> {
        let t = forward(net, &ex).ok()?;
        let l = Loss::Mse.value(&t.f, &ey);
        (!t.diverged && l.is_finite()).then_some(l)
    };

    let mut records = Vec::new();
    let mut kernels = Vec::new();
    let mut last = match eval(&net) {
        Some(l) => l,
        None => {
            records.push(SweepRecord {
                diverged: true,
                ..template.clone()
            });
            return Ok(TrainResult {
                records,
                network: net,
                final_loss: f64::NAN,
                diverged: true,
                kernels,
            });
        }
    };
    records.push(SweepRecord {
        train_loss: last,
        ..template.clone()
    });
    let checkpoint = |net: &Network, step: u64, kernels: &mut Vec<(u64, KernelMatrix)>| {
        if opts.ntk_every > 0 && step % opts.ntk_every == 0 {
            if let Ok(k) = ntk(net, &px) {
                kernels.push((step, k));
            }
        }
    };
    checkpoint(&net, 0, &mut kernels);

    let mut state = opts.optimizer.state(&net)?;
    let mut batches = Batches::new(data.len(), stream.substream(1));
    let mut diverged = false;
    for t in 0..opts.steps {
        let (bx, by) = data.batch(batches.next(opts.batch));
        let outcome = (|| -> Result<()> {
            let tr = forward(&net, &bx)?;
            if tr.diverged {
                return Err(Error::Diverged("forward pass".into()));
            }
            let delta = Loss::Mse.delta(&tr.f, &by);
            let b = backward(&net, &tr, &delta)?;
            opts.optimizer.step(&mut net, &b.grads, &mut state, t)
        })();
        let step = t + 1;
        let record = step % record_every == 0 || step == opts.steps;
        let loss = match outcome {
            Ok(()) if record => eval(&net),
            Ok(()) => Some(last),
            Err(Error::Diverged(_)) => None,
            Err(e) => return Err(e),
        };
        match loss {
            Some(l) => last = l,
            None => {
                diverged = true;
                records.push(SweepRecord {
                    step,
                    train_loss: last,
                    diverged: true,
                    ..template.clone()
                });
                break;
            }
        }
        if record {
            records.push(SweepRecord {
                step,
                train_loss: last,
                ..template.clone()
            });
        }
        checkpoint(&net, step, &mut kernels);
    }
    Ok(TrainResult {
        records,
        network: net,
        final_loss: last,
        diverged,
        kernels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{synth_dataset, Teacher};
    use crate::numerics::Activation;

    fn setup() -> (ParamConfig, Dataset) {
        let mut cfg = ParamConfig::new(16, 4, 8, Scheme::MuPSqrtL);
        cfg.activation = Activation::Relu;
        let ds = synth_dataset(8, 64, Teacher::ShallowRelu, 0.0, &RngStream::new(2, 0)).unwrap();
        (cfg, ds)
    }

    #[test]
    fn zero_steps_records_initial_loss_only() {
        let (cfg, ds) = setup();
        let opts = TrainOptions::new(OptimizerSpec::sgd(0.1), 0, 8);
        let r = run_training(&cfg, &ds, &opts, &RngStream::new(1, 0)).unwrap();
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.records[0].step, 0);
        assert!(!r.diverged);
    }

    #[test]
    fn zero_lr_is_flat() {
        let (cfg, ds) = setup();
        let opts = TrainOptions::new(OptimizerSpec::sgd(0.0), 20, 8);
        let r = run_training(&cfg, &ds, &opts, &RngStream::new(1, 0)).unwrap();
        assert_eq!(r.records.len(), 21);
        assert!(r
            .records
            .iter()
            .all(|x| x.train_loss == r.records[0].train_loss));
    }

    #[test]
    fn training_reduces_loss_and_is_repeatable() {
        let (cfg, ds) = setup();
        let mut opts = TrainOptions::new(OptimizerSpec::sgd(0.05), 60, 16);
        opts.record_every = 20;
        let a = run_training(&cfg, &ds, &opts, &RngStream::new(1, 3)).unwrap();
        let b = run_training(&cfg, &ds, &opts, &RngStream::new(1, 3)).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 4);
        assert!(a.final_loss < 0.8 * a.records[0].train_loss);
    }

    #[test]
    fn divergence_keeps_last_finite_loss() {
        let (mut cfg, ds) = setup();
        cfg.scheme = Scheme::Sp;
        let opts = TrainOptions::new(OptimizerSpec::sgd(1e4), 50, 16);
        let r = run_training(&cfg, &ds, &opts, &RngStream::new(1, 0)).unwrap();
        assert!(r.diverged);
        let last = r.records.last().unwrap();
        assert!(last.diverged && last.train_loss.is_finite());
        assert!(last.step < 50);
    }

    #[test]
    fn ntk_checkpoints_and_csv() {
        let (cfg, ds) = setup();
        let mut opts = TrainOptions::new(OptimizerSpec::sgd(0.05), 4, 8);
        opts.ntk_every = 2;
        opts.ntk_probe = 3;
        let r = run_training(&cfg, &ds, &opts, &RngStream::new(1, 0)).unwrap();
        let steps: Vec<u64> = r.kernels.iter().map(|(s, _)| *s).collect();
        assert_eq!(steps, vec![0, 2, 4]);
        assert_eq!(r.kernels[0].1.size(), 3);
        let mut buf = Vec::new();
        write_sweep_csv(&r.records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("scheme,N,L,K,lr,gamma0,seed,step,train_loss,diverged\n"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn rejects_oversized_batch() {
        let (cfg, ds) = setup();
        let opts = TrainOptions::new(OptimizerSpec::sgd(0.1), 1, 65);
        assert!(run_training(&cfg, &ds, &opts, &RngStream::new(1, 0)).is_err());
    }
}
