//! Bias-free residual MLP.
//!
//! Layout: read-in `h^1 = beta_0 W^0 x`, then `L` residual blocks
//! `h^{l+1} = h^l + branch_l(h^l)`, then a scalar read-out of `h^{L+1}`.
//! A block with `K` matrices computes
//!
//! ```text
//! t^1     = s W^{l,0} phi(h^l)
//! t^{k+1} = s W^{l,k} phi(t^k)
//! branch  = beta_l W^{l,K-1} phi(t^{K-1})
//! ```
//!
//! with `s` the internal coupling; for `K = 1` the branch is
//! `beta_l W^{l,0} phi(h^l)`. Activations are stored batch-major: one row per
//! sample, one column per neuron.

mod checkpoint;
mod pass;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use pass::{
    activate as activate_matrix, backward, backward_fields, finite_diff_grad, forward,
    gradient_relative_error, BackwardTrace, ForwardTrace, Loss, DIVERGENCE_THRESHOLD,
};

use crate::error::{Error, Result};
use crate::numerics::{fill_gaussian_row, Matrix, RngStream};
use crate::param::ParamConfig;

/// Identifies one weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorId {
    ReadIn,
    Block { layer: usize, k: usize },
    ReadOut,
}

impl TensorId {
    pub fn name(&self) -> String {
        match self {
            TensorId::ReadIn => "readin".into(),
            TensorId::Block { layer, k } => format!("block.{layer}.{k}"),
            TensorId::ReadOut => "readout".into(),
        }
    }
}

/// One value per weight tensor: weights, gradients, or optimizer buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `N x D`
    pub readin: Matrix,
    /// `L` blocks of `K` matrices, each `N x N`.
    pub blocks: Vec<Vec<Matrix>>,
    /// `1 x N`
    pub readout: Matrix,
}

impl Params {
    pub fn zeros(cfg: &ParamConfig) -> Self {
        let n = cfg.width;
        Self {
            readin: Matrix::zeros(n, cfg.input_dim),
            blocks: (0..cfg.depth)
                .map(|_| {
                    (0..cfg.layers_per_block)
                        .map(|_| Matrix::zeros(n, n))
                        .collect()
                })
                .collect(),
            readout: Matrix::zeros(1, n),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            readin: Matrix::zeros(self.readin.rows(), self.readin.cols()),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    b.iter()
                        .map(|m| Matrix::zeros(m.rows(), m.cols()))
                        .collect()
                })
                .collect(),
            readout: Matrix::zeros(1, self.readout.cols()),
        }
    }

    /// Tensors in canonical order: read-in, blocks by `(layer, k)`, read-out.
    pub fn iter(&self) -> impl Iterator<Item = (TensorId, &Matrix)> {
        std::iter::once((TensorId::ReadIn, &self.readin))
            .chain(self.blocks.iter().enumerate().flat_map(|(layer, b)| {
                b.iter()
                    .enumerate()
                    .map(move |(k, m)| (TensorId::Block { layer, k }, m))
            }))
            .chain(std::iter::once((TensorId::ReadOut, &self.readout)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (TensorId, &mut Matrix)> {
        std::iter::once((TensorId::ReadIn, &mut self.readin))
            .chain(self.blocks.iter_mut().enumerate().flat_map(|(layer, b)| {
                b.iter_mut()
                    .enumerate()
                    .map(move |(k, m)| (TensorId::Block { layer, k }, m))
            }))
            .chain(std::iter::once((TensorId::ReadOut, &mut self.readout)))
    }

    pub fn get(&self, id: TensorId) -> &Matrix {
        match id {
            TensorId::ReadIn => &self.readin,
            TensorId::Block { layer, k } => &self.blocks[layer][k],
            TensorId::ReadOut => &self.readout,
        }
    }

    pub fn get_mut(&mut self, id: TensorId) -> &mut Matrix {
        match id {
            TensorId::ReadIn => &mut self.readin,
            TensorId::Block { layer, k } => &mut self.blocks[layer][k],
            TensorId::ReadOut => &mut self.readout,
        }
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.iter()
            .zip(other.iter())
            .all(|((_, a), (_, b))| a.shape() == b.shape())
            && self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn num_values(&self) -> usize {
        self.iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn dot(&self, other: &Params) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|((_, a), (_, b))| a.dot(b))
            .sum()
    }

    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        for ((_, a), (_, b)) in self.iter_mut().zip(other.iter()) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, m) in self.iter_mut() {
            m.scale_in_place(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, m)| m.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().map(|(_, m)| m.max_abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    cfg: ParamConfig,
    pub params: Params,
}

impl Network {
    /// Wrap existing weights; shapes must match `cfg`.
    pub fn from_params(cfg: ParamConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        if !params.same_shape(&Params::zeros(&cfg)) {
            return Err(Error::Shape(
                "weights do not match the configuration".into(),
            ));
        }
        Ok(Self { cfg, params })
    }

    pub fn cfg(&self) -> &ParamConfig {
        &self.cfg
    }

    pub fn is_trainable(&self, id: TensorId) -> bool {
        is_trainable(&self.cfg, id)
    }
}

pub fn is_trainable(cfg: &ParamConfig, id: TensorId) -> bool {
    match id {
        TensorId::ReadIn => cfg.train_readin,
        TensorId::ReadOut => cfg.train_readout,
        TensorId::Block { .. } => true,
    }
}

/// Deterministic weight generator shared by [`init_network`] and the
/// streaming evaluators, which regenerate rows instead of storing matrices.
///
/// Every row is keyed, so a narrower network built from the same stream
/// holds the top-left block of each wider matrix. With `fine_depth = r L`,
/// block `l` is `r^{-1/2}` times the sum of fine blocks `l r .. (l+1) r - 1`,
/// which couples networks of different depth to one reference realization.
#[derive(Debug, Clone)]
pub struct WeightSource {
    stream: RngStream,
    fine_depth: usize,
    ratio: usize,
    k: usize,
}

impl WeightSource {
    pub fn new(cfg: &ParamConfig, stream: &RngStream, fine_depth: usize) -> Result<Self> {
        cfg.validate()?;
        if fine_depth < cfg.depth || fine_depth % cfg.depth != 0 {
            return Err(Error::Config(format!(
                "fine depth {fine_depth} is not a multiple of depth {}",
                cfg.depth
            )));
        }
        if fine_depth != cfg.depth && cfg.layers_per_block != 1 {
            return Err(Error::Config(
                "depth coupling is only defined for one layer per block".into(),
            ));
        }
        Ok(Self {
            stream: stream.clone(),
            fine_depth,
            ratio: fine_depth / cfg.depth,
            k: cfg.layers_per_block,
        })
    }

    pub fn fine_depth(&self) -> usize {
        self.fine_depth
    }

    pub fn readin_row(&self, row: &mut [f64], std: f64, i: usize) {
        fill_gaussian_row(row, std, &self.stream.substream(0), i as u64);
    }

    pub fn readout_row(&self, row: &mut [f64], std: f64) {
        fill_gaussian_row(row, std, &self.stream.substream(1), 0);
    }

    /// Row `i` of `W^{layer,k}` with unit variance scaled by `std`.
    /// `scratch` must have the row's length.
    pub fn block_row(
        &self,
        row: &mut [f64],
        scratch: &mut [f64],
        std: f64,
        layer: usize,
        k: usize,
        i: usize,
    ) {
        let key = |fine: usize| self.stream.substream(2 + (fine * self.k + k) as u64);
        if self.ratio == 1 {
            fill_gaussian_row(row, std, &key(layer), i as u64);
            return;
        }
        let s = std / (self.ratio as f64).sqrt();
        row.fill(0.0);
        for fine in layer * self.ratio..(layer + 1) * self.ratio {
            fill_gaussian_row(scratch, s, &key(fine), i as u64);
            for (r, v) in row.iter_mut().zip(scratch.iter()) {
                *r += v;
            }
        }
    }

    pub fn block_matrix(&self, cfg: &ParamConfig, layer: usize, k: usize) -> Matrix {
        let n = cfg.width;
        let mut m = Matrix::zeros(n, n);
        if cfg.zero_block_readout && k + 1 == cfg.layers_per_block {
            return m;
        }
        let std = cfg.variance_unchecked(false).sqrt();
        let mut scratch = vec![0.0; n];
        for i in 0..n {
            self.block_row(m.row_mut(i), &mut scratch, std, layer, k, i);
        }
        m
    }
}

/// Sample all weights from `stream` with the configured variances.
pub fn init_network(cfg: &ParamConfig, stream: &RngStream) -> Result<Network> {
    init_network_coupled(cfg, stream, cfg.depth)
}

/// As [`init_network`], with the hidden weights built from a reference
/// network of depth `fine_depth` (see [`WeightSource`]).
pub fn init_network_coupled(
    cfg: &ParamConfig,
    stream: &RngStream,
    fine_depth: usize,
) -> Result<Network> {
    let src = WeightSource::new(cfg, stream, fine_depth)?;
    let mut params = Params::zeros(cfg);
    let readin_std = cfg.variance_unchecked(true).sqrt();
    for i in 0..cfg.width {
        src.readin_row(params.readin.row_mut(i), readin_std, i);
    }
    let hidden_std = cfg.variance_unchecked(false).sqrt();
    src.readout_row(params.readout.row_mut(0), hidden_std);
    for layer in 0..cfg.depth {
        for k in 0..cfg.layers_per_block {
            params.blocks[layer][k] = src.block_matrix(cfg, layer, k);
        }
    }
    Network::from_params(cfg.clone(), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Scheme;

    fn cfg(n: usize, l: usize) -> ParamConfig {
        ParamConfig::new(n, l, 4, Scheme::MuPSqrtL)
    }

    #[test]
    fn init_variance_matches_config() {
        let net = init_network(&cfg(512, 1), &RngStream::new(3, 0)).unwrap();
        let w = &net.params.blocks[0][0];
        let var = w.sum_squares() / w.data().len() as f64;
        assert!((var - 1.0).abs() < 0.02, "{var}");

        let mut sp = cfg(512, 1);
        sp.scheme = Scheme::Sp;
        let net = init_network(&sp, &RngStream::new(3, 0)).unwrap();
        let w = &net.params.blocks[0][0];
        let var = w.sum_squares() / w.data().len() as f64 * 512.0;
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn zero_block_readout_zeroes_last_matrix() {
        let mut c = cfg(8, 3);
        c.layers_per_block = 2;
        c.zero_block_readout = true;
        let net = init_network(&c, &RngStream::new(1, 1)).unwrap();
        for b in &net.params.blocks {
            assert!(b[1].data().iter().all(|&v| v == 0.0));
            assert!(b[0].max_abs() > 0.0);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let s = RngStream::new(5, 9);
        let a = init_network(&cfg(16, 4), &s).unwrap();
        let b = init_network(&cfg(16, 4), &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn narrower_network_is_top_left_block() {
        let s = RngStream::new(5, 9);
        let wide = init_network(&cfg(32, 2), &s).unwrap();
        let narrow = init_network(&cfg(8, 2), &s).unwrap();
        assert_eq!(
            wide.params.blocks[1][0].submatrix(8, 8),
            narrow.params.blocks[1][0]
        );
        assert_eq!(wide.params.readin.submatrix(8, 4), narrow.params.readin);
        assert_eq!(wide.params.readout.submatrix(1, 8), narrow.params.readout);
    }

    #[test]
    fn coupled_blocks_are_scaled_sums() {
        let s = RngStream::new(2, 0);
        let fine = init_network(&cfg(16, 8), &s).unwrap();
        let coarse = init_network_coupled(&cfg(16, 2), &s, 8).unwrap();
        let mut expect = Matrix::zeros(16, 16);
        for j in 4..8 {
            expect.axpy(0.5, &fine.params.blocks[j][0]);
        }
        let diff = coarse.params.blocks[1][0]
            .data()
            .iter()
            .zip(expect.data())
            .map(|(a, b)| (a - b).abs());
        assert!(diff.fold(0.0, f64::max) < 1e-12);
        assert_eq!(coarse.params.readin, fine.params.readin);
    }

    #[test]
    fn coupling_rejects_bad_ratio() {
        let s = RngStream::new(2, 0);
        assert!(init_network_coupled(&cfg(4, 3), &s, 8).is_err());
        let mut c = cfg(4, 2);
        c.layers_per_block = 2;
        assert!(init_network_coupled(&c, &s, 4).is_err());
    }

    #[test]
    fn params_iterate_in_canonical_order() {
        let mut c = cfg(3, 2);
        c.layers_per_block = 2;
        let p = Params::zeros(&c);
        let names: Vec<_> = p.iter().map(|(id, _)| id.name()).collect();
        assert_eq!(
            names,
            [
                "readin",
                "block.0.0",
                "block.0.1",
                "block.1.0",
                "block.1.1",
                "readout"
            ]
        );
        assert_eq!(p.num_values(), 3 * 4 + 4 * 9 + 3);
    }
}
