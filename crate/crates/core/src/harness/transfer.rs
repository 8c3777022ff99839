use super::data::Dataset;
use super::train::{run_training, SweepRecord, TrainOptions};
use super::try_parallel_map;
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::param::{ParamConfig, Scheme};

#[derive(Debug, Clone, PartialEq)]
pub struct TransferSpec {
    /// Template; width, depth and scheme are set per cell.
    pub base: ParamConfig,
    pub schemes: Vec<Scheme>,
    /// `(N, L)` lattice.
    pub cells: Vec<(usize, usize)>,
    /// Log-spaced, increasing.
    pub lrs: Vec<f64>,
    pub seeds: usize,
    /// The schedule target is replaced by each grid value.
    pub train: TrainOptions,
    pub master_seed: u64,
}

impl TransferSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schemes.is_empty() || self.cells.is_empty() || self.seeds == 0 {
            return bad("transfer sweep needs schemes, cells and seeds".into());
        }
        if self.lrs.is_empty() || self.lrs.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("learning-rate grid must be non-empty and positive".into());
        }
        if self.lrs.len() >= 2 {
            let r0 = (self.lrs[1] / self.lrs[0]).ln();
            for w in self.lrs.windows(2) {
                let r = (w[1] / w[0]).ln();
                if !(r > 0.0) || (r - r0).abs() > 1e-6 * r0.abs() {
                    return bad(format!(
                        "learning-rate grid {:?} is not log-spaced",
                        self.lrs
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Mean final loss per grid point for one `(scheme, N, L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferCell {
    pub scheme: Scheme,
    pub n: usize,
    pub l: usize,
    /// `None` where any seed diverged.
    pub mean_loss: Vec<Option<f64>>,
    pub diverged_runs: Vec<usize>,
    /// Grid index of the smallest mean loss; `None` if every point diverged.
    pub optimum: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferVerdict {
    pub scheme: Scheme,
    /// Largest pairwise optimum index difference over defined cells.
    pub max_shift: Option<usize>,
    pub undefined_cells: usize,
}

impl TransferVerdict {
    /// Optimum defined everywhere and stable within one grid step.
    pub fn transfers(&self) -> bool {
        self.undefined_cells == 0 && self.max_shift.is_some_and(|s| s <= 1)
    }
}

#[derive(Debug, Clone)]
pub struct TransferResult {
    pub records: Vec<SweepRecord>,
    pub cells: Vec<TransferCell>,
    pub verdicts: Vec<TransferVerdict>,
}

/// Argmin per row, skipping missing entries.
pub fn optimal_indices(table: &[Vec<Option<f64>>]) -> Vec<Option<usize>> {
    table
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter_map(|(i, v)| v.map(|v| (i, v)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
        })
        .collect()
}

fn max_shift(opt: &[Option<usize>]) -> Option<usize> {
    let d: Vec<usize> = opt.iter().flatten().copied().collect();
    Some(d.iter().max()? - d.iter().min()?)
}

/// Learning-rate sweep over schemes and an `(N, L)` lattice. Seed `s` uses
/// stream `(master_seed, s)` in every cell, so cells differ only through
/// width, depth, scheme and rate.
pub fn lr_transfer_experiment(
    spec: &TransferSpec,
    data: &Dataset,
    workers: usize,
) -> Result<TransferResult> {
    spec.validate()?;
    let (nc, nl, ns) = (spec.cells.len(), spec.lrs.len(), spec.seeds);
    let total = spec.schemes.len() * nc * nl * ns;
    let runs = try_parallel_map(workers, total, |task| {
        let seed = task % ns;
        let lr_i = (task / ns) % nl;
        let cell = (task / (ns * nl)) % nc;
        let scheme = spec.schemes[task / (ns * nl * nc)];
        let (n, l) = spec.cells[cell];
        let mut cfg = spec.base.clone();
        cfg.width = n;
        cfg.depth = l;
        cfg.scheme = scheme;
        cfg.eta0 = spec.lrs[lr_i];
        let mut opts = spec.train.clone();
        opts.optimizer.schedule.target = spec.lrs[lr_i];
        let r = run_training(
            &cfg,
            data,
            &opts,
            &RngStream::new(spec.master_seed, seed as u64),
        )?;
        Ok((r.records, r.final_loss, r.diverged))
    })?;

    let mut records = Vec::new();
    let mut cells = Vec::new();
    let mut verdicts = Vec::new();
    for (si, &scheme) in spec.schemes.iter().enumerate() {
        let mut table = Vec::new();
        let mut div = Vec::new();
        for ci in 0..nc {
            let mut row = Vec::new();
            let mut drow = Vec::new();
            for li in 0..nl {
                let base = ((si * nc + ci) * nl + li) * ns;
                let group = &runs[base..base + ns];
                let bad = group.iter().filter(|r| r.2).count();
                let mean = group.iter().map(|r| r.1).sum::<f64>() / ns as f64;
                row.push((bad == 0).then_some(mean));
                drow.push(bad);
                for r in group {
                    records.extend(r.0.iter().cloned());
                }
            }
            table.push(row);
            div.push(drow);
        }
        let opt = optimal_indices(&table);
        verdicts.push(TransferVerdict {
            scheme,
            max_shift: max_shift(&opt),
            undefined_cells: opt.iter().filter(|o| o.is_none()).count(),
        });
        for (ci, ((mean_loss, diverged_runs), optimum)) in
            table.into_iter().zip(div).zip(opt).enumerate()
        {
            let (n, l) = spec.cells[ci];
            cells.push(TransferCell {
                scheme,
                n,
                l,
                mean_loss,
                diverged_runs,
                optimum,
            });
        }
    }
    Ok(TransferResult {
        records,
        cells,
        verdicts,
    })
}
