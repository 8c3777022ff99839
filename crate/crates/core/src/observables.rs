//! Kernel order parameters of a finite network and ensemble statistics.
//!
//! Layer indices follow the preactivations: layer `l` in `1..=L+1` refers to
//! `h^l`. The NTK is normalized as `lr_factor * sum_theta df(x) df(x')`, the
//! kernel that drives `f` under one unit of base learning rate.

use std::io::Write;

use crate::error::{Error, Result};
use crate::numerics::{gemm, Matrix, Trans};
use crate::param::{ParamConfig, ReadoutInput};
use crate::resnet::{
    activate_matrix, backward, forward, BackwardTrace, ForwardTrace, Network, TensorId,
};

/// Largest `P * #params` that [`ntk_exact`] will materialize by default.
pub const DEFAULT_NTK_CAP: usize = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelLabel {
    Feature,
    Gradient,
    Ntk,
    Input,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub label: KernelLabel,
    pub values: Matrix,
}

impl KernelMatrix {
    pub fn size(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let p = self.size();
        let mut worst: f64 = 0.0;
        for i in 0..p {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Largest entrywise difference relative to the largest entry of `other`.
    pub fn relative_difference(&self, other: &KernelMatrix) -> f64 {
        let scale = other.values.max_abs().max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for (a, b) in self.values.data().iter().zip(other.values.data()) {
            worst = worst.max((a - b).abs());
        }
        worst / scale
    }

    /// Row-major upper triangle with header `i,j,value`.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "i,j,value")?;
        for i in 0..self.size() {
            for j in i..self.size() {
                writeln!(out, "{i},{j},{}", self.get(i, j))?;
            }
        }
        Ok(())
    }
}

/// `(1/cols) A A^T`
fn gram(a: &Matrix, label: KernelLabel) -> KernelMatrix {
    let p = a.rows();
    let mut out = Matrix::zeros(p, p);
    gemm(
        1.0 / a.cols() as f64,
        a,
        Trans::No,
        a,
        Trans::Yes,
        0.0,
        &mut out,
    );
    symmetrize(&mut out);
    KernelMatrix { label, values: out }
}

fn symmetrize(m: &mut Matrix) {
    let p = m.rows();
    for i in 0..p {
        for j in 0..i {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
}

fn check_layer(depth: usize, layer: usize) -> Result<usize> {
    if layer == 0 || layer > depth + 1 {
        return Err(Error::Precondition(format!(
            "layer {layer} outside [1, {}]",
            depth + 1
        )));
    }
    Ok(layer - 1)
}

/// `Phi^l = (1/N) phi(h^l) phi(h^l)^T` over the batch.
pub fn feature_kernel(trace: &ForwardTrace, layer: usize) -> Result<KernelMatrix> {
    if trace.diverged {
        return Err(Error::Diverged(
            "feature kernel of a divergent trace".into(),
        ));
    }
    let i = check_layer(trace.h.len() - 1, layer)?;
    Ok(gram(
        &activate_matrix(trace.activation, &trace.h[i]),
        KernelLabel::Feature,
    ))
}

/// `G^l = (1/N) g^l g^l^T` over the batch.
pub fn gradient_kernel(back: &BackwardTrace, layer: usize) -> Result<KernelMatrix> {
    let i = check_layer(back.g.len() - 1, layer)?;
    Ok(gram(&back.g[i], KernelLabel::Gradient))
}

/// `Kx = (1/D) X X^T`
pub fn input_kernel(x: &Matrix) -> KernelMatrix {
    gram(x, KernelLabel::Input)
}

/// NTK assembled from kernel order parameters: the layer sum of
/// `G^{l+1} Phi^l` terms (one per matrix for multi-layer blocks), plus
/// `G^1 Kx` for a trainable read-in and the read-out feature kernel for a
/// trainable read-out.
pub fn ntk_kernel_sum(
    net: &Network,
    fwd: &ForwardTrace,
    back: &BackwardTrace,
) -> Result<KernelMatrix> {
    ntk_from_traces(net.cfg(), fwd, back)
}

/// [`ntk_kernel_sum`] for traces produced without a stored network.
/// Only the kernels are read; `back.grads` may be empty.
pub fn ntk_from_traces(
    cfg: &ParamConfig,
    fwd: &ForwardTrace,
    back: &BackwardTrace,
) -> Result<KernelMatrix> {
    if fwd.h.len() != cfg.depth + 1 || back.g.len() != cfg.depth + 1 {
        return Err(Error::Shape("traces do not match the configuration".into()));
    }
    if fwd.diverged {
        return Err(Error::Diverged("NTK of a divergent trace".into()));
    }
    let p = fwd.batch();
    let lr = cfg.lr_factor();
    let g0sq = cfg.gamma0 * cfg.gamma0;
    let depth = cfg.depth as f64;
    let beta = cfg.hidden_scale();
    let s = cfg.internal_scale();
    let k = cfg.layers_per_block;
    let mut total = Matrix::zeros(p, p);
    let mut add = |a: &KernelMatrix, b: &KernelMatrix, c: f64| {
        for (t, (x, y)) in total
            .data_mut()
            .iter_mut()
            .zip(a.values.data().iter().zip(b.values.data()))
        {
            *t += c * x * y;
        }
    };
    for layer in 0..cfg.depth {
        for j in 0..k {
            let input = if j == 0 {
                &fwd.h[layer]
            } else {
                &fwd.internal[layer][j - 1]
            };
            let phi = gram(
                &activate_matrix(cfg.activation, input),
                KernelLabel::Feature,
            );
            if j + 1 == k {
                let g = gram(&back.g[layer + 1], KernelLabel::Gradient);
                add(&g, &phi, lr * beta * beta / g0sq);
            } else {
                let g = gram(&back.g_internal[layer][j], KernelLabel::Gradient);
                add(&g, &phi, lr * s * s / (g0sq * depth));
            }
        }
    }
    if cfg.train_readin {
        let n = cfg.width as f64;
        let d = cfg.input_dim as f64;
        let b0 = cfg.readin_scale();
        let g1 = gram(&back.g[0], KernelLabel::Gradient);
        add(&g1, &input_kernel(&fwd.x), lr * b0 * b0 * d / (n * g0sq));
    }
    if cfg.train_readout {
        let c = cfg.readout_scale() / cfg.output_scale();
        let feats = match fwd.readout_input {
            ReadoutInput::Activation => activate_matrix(cfg.activation, fwd.h.last().unwrap()),
            ReadoutInput::Stream => fwd.h.last().unwrap().clone(),
        };
        let phi = gram(&feats, KernelLabel::Feature);
        for (t, v) in total.data_mut().iter_mut().zip(phi.values.data()) {
            *t += lr * c * c * cfg.width as f64 * v;
        }
    }
    symmetrize(&mut total);
    Ok(KernelMatrix {
        label: KernelLabel::Ntk,
        values: total,
    })
}

/// NTK as the Gram matrix of per-sample parameter gradients over all
/// trainable tensors, scaled by the learning-rate factor.
pub fn ntk_exact(net: &Network, x: &Matrix, cap: usize) -> Result<KernelMatrix> {
    let p = x.rows();
    let trainable: Vec<TensorId> = net
        .params
        .iter()
        .map(|(id, _)| id)
        .filter(|&id| net.is_trainable(id))
        .collect();
    let count: usize = trainable
        .iter()
        .map(|&id| net.params.get(id).data().len())
        .sum();
    let needed = p.saturating_mul(count);
    if needed > cap {
        return Err(Error::MemoryCap { needed, cap });
    }
    let mut per_sample = Vec::with_capacity(p);
    for i in 0..p {
        let xi = x.submatrix_rows(i, 1);
        let t = forward(net, &xi)?;
        // delta = -1 on a batch of one gives grads = df/dtheta
        per_sample.push(backward(net, &t, &[-1.0])?.grads);
    }
    let lr = net.cfg().lr_factor();
    let mut out = Matrix::zeros(p, p);
    for &id in &trainable {
        for a in 0..p {
            for b in a..p {
                let v = per_sample[a].get(id).dot(per_sample[b].get(id));
                out.set(a, b, out.get(a, b) + lr * v);
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            out.set(a, b, out.get(b, a));
        }
    }
    Ok(KernelMatrix {
        label: KernelLabel::Ntk,
        values: out,
    })
}

/// Convenience: forward, gradient fields and the assembled NTK at the
/// current weights.
pub fn ntk(net: &Network, x: &Matrix) -> Result<KernelMatrix> {
    let f = forward(net, x)?;
    let b = crate::resnet::backward_fields(net, &f)?;
    ntk_kernel_sum(net, &f, &b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub count: usize,
    pub mean: Vec<f64>,
    variance: Option<Vec<f64>>,
}

impl EnsembleStats {
    /// Unbiased per-entry variance; needs at least two members.
    pub fn variance(&self) -> Result<&[f64]> {
        self.variance.as_deref().ok_or_else(|| {
            Error::Precondition(format!(
                "variance needs at least 2 samples, have {}",
                self.count
            ))
        })
    }

    /// Standard error of each mean entry.
    pub fn stderr(&self) -> Result<Vec<f64>> {
        let e = self.count as f64;
        Ok(self.variance()?.iter().map(|v| (v / e).sqrt()).collect())
    }
}

/// Per-entry mean and unbiased variance over ensemble members.
pub fn ensemble_stats(values: &[Vec<f64>]) -> Result<EnsembleStats> {
    let e = values.len();
    if e == 0 {
        return Err(Error::Precondition("empty ensemble".into()));
    }
    let width = values[0].len();
    if values.iter().any(|v| v.len() != width) {
        return Err(Error::Shape("ensemble members differ in length".into()));
    }
    let mean: Vec<f64> = (0..width)
        .map(|j| values.iter().map(|v| v[j]).sum::<f64>() / e as f64)
        .collect();
    let variance = (e >= 2).then(|| {
        (0..width)
            .map(|j| values.iter().map(|v| (v[j] - mean[j]).powi(2)).sum::<f64>() / (e - 1) as f64)
            .collect()
    });
    Ok(EnsembleStats {
        count: e,
        mean,
        variance,
    })
}

/// Mean and unbiased variance of scalars.
pub fn scalar_stats(values: &[f64]) -> Result<(f64, f64)> {
    let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
    let s = ensemble_stats(&rows)?;
    Ok((s.mean[0], s.variance()?[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_matrix, phi_pair_mean, Activation, PairCovariance, RngStream};
    use crate::param::{ParamConfig, Scheme};
    use crate::resnet::{backward_fields, init_network, Loss};

    fn psd_min_eig_2x2(k: &KernelMatrix) -> f64 {
        let (a, b, d) = (k.get(0, 0), k.get(0, 1), k.get(1, 1));
        let tr = a + d;
        let det = a * d - b * b;
        0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt())
    }

    fn batch(p: usize, d: usize, seed: u64) -> Matrix {
        gaussian_matrix(p, d, 1.0, &mut RngStream::new(seed, 5))
    }

    #[test]
    fn feature_kernel_normalization() {
        let t = ForwardTrace {
            x: Matrix::zeros(1, 1),
            h: vec![Matrix::row_vector(vec![1.0, -1.0, 1.0, -1.0]); 2],
            internal: vec![vec![]],
            f: vec![0.0],
            diverged: false,
            activation: Activation::Linear,
            readout_input: ReadoutInput::Activation,
        };
        assert_eq!(feature_kernel(&t, 1).unwrap().get(0, 0), 1.0);
        assert!(feature_kernel(&t, 0).is_err());
        assert!(feature_kernel(&t, 3).is_err());
    }

    #[test]
    fn duplicated_rows_give_identical_kernel_rows() {
        let cfg = ParamConfig::new(16, 2, 3, Scheme::MuPSqrtL);
        let net = init_network(&cfg, &RngStream::new(1, 0)).unwrap();
        let mut x = batch(3, 3, 2);
        let r0 = x.row(0).to_vec();
        x.row_mut(2).copy_from_slice(&r0);
        let t = forward(&net, &x).unwrap();
        let k = feature_kernel(&t, 2).unwrap();
        for j in 0..3 {
            assert_eq!(k.get(0, j), k.get(2, j));
        }
        assert!(k.max_asymmetry() < 1e-10);
    }

    #[test]
    fn relu_feature_kernel_of_independent_gaussians() {
        let n = 8192;
        let h = gaussian_matrix(2, n, 1.0, &mut RngStream::new(4, 4));
        let t = ForwardTrace {
            x: Matrix::zeros(2, 1),
            h: vec![h.clone(), h],
            internal: vec![vec![]],
            f: vec![0.0; 2],
            diverged: false,
            activation: Activation::Relu,
            readout_input: ReadoutInput::Activation,
        };
        let k = feature_kernel(&t, 1).unwrap();
        let expect = phi_pair_mean(
            Activation::Relu,
            PairCovariance::new(1.0, 0.0, 1.0).unwrap(),
        )
        .unwrap();
        // per-neuron product relu(a) relu(b) has variance 1/4 - 1/(2 pi)^2
        let se = ((0.25 - expect * expect) / n as f64).sqrt();
        assert!(
            (k.get(0, 1) - expect).abs() < 3.0 * se,
            "{} vs {expect}",
            k.get(0, 1)
        );
        assert!(psd_min_eig_2x2(&k) > -1e-8);
    }

    #[test]
    fn readout_boundary_gradient_kernel_is_one() {
        // muP read-out gives g^{L+1} = w phi'(h); a stream read-out makes it w
        let mut cfg = ParamConfig::new(4096, 2, 4, Scheme::MuPSqrtL);
        cfg.readout_input = ReadoutInput::Stream;
        let net = init_network(&cfg, &RngStream::new(2, 2)).unwrap();
        let x = batch(2, 4, 1);
        let t = forward(&net, &x).unwrap();
        let b = backward_fields(&net, &t).unwrap();
        let g = gradient_kernel(&b, 3).unwrap();
        let w2 = net.params.readout.sum_squares() / 4096.0;
        for v in g.values.data() {
            assert!((v - w2).abs() < 1e-12);
        }
        assert!((w2 - 1.0).abs() < 0.1);
    }

    #[test]
    fn gradient_kernel_ignores_loss() {
        let cfg = ParamConfig::new(16, 3, 3, Scheme::MuPSqrtL);
        let net = init_network(&cfg, &RngStream::new(1, 9)).unwrap();
        let x = batch(3, 3, 3);
        let t = forward(&net, &x).unwrap();
        let a = backward(&net, &t, &Loss::Mse.delta(&t.f, &[1.0, 2.0, 3.0])).unwrap();
        let b = backward(&net, &t, &[0.0, 0.0, 0.0]).unwrap();
        for l in 1..=4 {
            assert_eq!(
                gradient_kernel(&a, l).unwrap(),
                gradient_kernel(&b, l).unwrap()
            );
        }
    }

    #[test]
    fn linear_identity_path_gradient_kernels_equal() {
        let mut cfg = ParamConfig::new(8, 4, 2, Scheme::MuPSqrtL);
        cfg.activation = Activation::Linear;
        let mut net = init_network(&cfg, &RngStream::new(1, 9)).unwrap();
        for b in net.params.blocks.iter_mut() {
            b[0].scale_in_place(0.0);
        }
        let x = batch(2, 2, 3);
        let t = forward(&net, &x).unwrap();
        let b = backward_fields(&net, &t).unwrap();
        let top = gradient_kernel(&b, 5).unwrap();
        for l in 1..5 {
            assert_eq!(gradient_kernel(&b, l).unwrap().values, top.values);
        }
    }

    #[test]
    fn one_layer_frozen_ends_collapses_to_feature_kernel() {
        let mut cfg = ParamConfig::new(32, 1, 3, Scheme::MuPSqrtL);
        cfg.train_readin = false;
        cfg.train_readout = false;
        cfg.readout_input = ReadoutInput::Stream;
        let net = init_network(&cfg, &RngStream::new(5, 0)).unwrap();
        let x = batch(3, 3, 7);
        let t = forward(&net, &x).unwrap();
        let b = backward_fields(&net, &t).unwrap();
        let k = ntk_kernel_sum(&net, &t, &b).unwrap();
        let phi = feature_kernel(&t, 1).unwrap();
        let g2 = gradient_kernel(&b, 2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = phi.get(i, j) * g2.get(i, j);
                assert!((k.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    fn all_configs() -> Vec<ParamConfig> {
        let mut out = Vec::new();
        for scheme in [
            Scheme::Sp,
            Scheme::MuP,
            Scheme::MuPSqrtL,
            Scheme::MuPDepthAlpha(1.0),
        ] {
            for k in [1, 2] {
                for (ri, ro) in [(true, true), (false, true), (true, false), (false, false)] {
                    let mut c = ParamConfig::new(12, 3, 3, scheme);
                    c.activation = Activation::Tanh;
                    c.layers_per_block = k;
                    c.train_readin = ri;
                    c.train_readout = ro;
                    out.push(c);
                }
            }
        }
        out
    }

    #[test]
    fn kernel_sum_matches_exact_ntk() {
        let x = batch(3, 3, 11);
        for cfg in all_configs() {
            let net = init_network(&cfg, &RngStream::new(3, 1)).unwrap();
            let a = ntk(&net, &x).unwrap();
            let b = ntk_exact(&net, &x, DEFAULT_NTK_CAP).unwrap();
            let rel = a.relative_difference(&b);
            assert!(rel < 1e-10, "{cfg:?}: {rel}");
        }
    }

    #[test]
    fn exact_ntk_gamma_rescaling_stays_consistent() {
        let x = batch(2, 3, 11);
        let mut cfg = ParamConfig::new(12, 3, 3, Scheme::MuPSqrtL);
        let net = init_network(&cfg, &RngStream::new(3, 1)).unwrap();
        cfg.gamma0 = 3.0;
        let net3 = Network::from_params(cfg, net.params.clone()).unwrap();
        let a = ntk(&net3, &x).unwrap();
        let b = ntk_exact(&net3, &x, DEFAULT_NTK_CAP).unwrap();
        assert!(a.relative_difference(&b) < 1e-10);
    }

    #[test]
    fn exact_ntk_diagonal_is_squared_gradient_norm() {
        let cfg = ParamConfig::new(10, 2, 2, Scheme::MuP);
        let net = init_network(&cfg, &RngStream::new(3, 1)).unwrap();
        let mut x = batch(1, 2, 1);
        let k = ntk_exact(&net, &x, DEFAULT_NTK_CAP).unwrap();
        let t = forward(&net, &x).unwrap();
        let g = backward(&net, &t, &[-1.0]).unwrap().grads;
        assert!((k.get(0, 0) - cfg.lr_factor() * g.dot(&g)).abs() < 1e-12 * k.get(0, 0));
        // identical samples: every entry equals the diagonal
        let r = x.row(0).to_vec();
        x = Matrix::from_rows(&[r.clone(), r]).unwrap();
        let k2 = ntk_exact(&net, &x, DEFAULT_NTK_CAP).unwrap();
        assert!((k2.get(0, 1) - k.get(0, 0)).abs() < 1e-12 * k.get(0, 0));
    }

    #[test]
    fn exact_ntk_respects_memory_cap() {
        let cfg = ParamConfig::new(10, 2, 2, Scheme::MuP);
        let net = init_network(&cfg, &RngStream::new(3, 1)).unwrap();
        assert!(matches!(
            ntk_exact(&net, &batch(4, 2, 1), 100),
            Err(Error::MemoryCap { .. })
        ));
    }

    #[test]
    fn ensemble_stats_basics() {
        let s = ensemble_stats(&[vec![2.0, 1.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(s.variance().unwrap(), &[0.0, 4.5]);
        let one = ensemble_stats(&[vec![1.0]]).unwrap();
        assert!(one.variance().is_err());
        assert!(ensemble_stats(&[]).is_err());
    }

    #[test]
    fn ensemble_variance_concentrates() {
        let e = 400;
        let mut s = RngStream::new(12, 0);
        let vals: Vec<f64> = (0..e).map(|_| 3.0 * s.normal()).collect();
        let (_, var) = scalar_stats(&vals).unwrap();
        let tol = 3.0 * (2.0 / (e as f64 - 1.0)).sqrt();
        assert!((var / 9.0 - 1.0).abs() < tol, "{var}");
    }

    #[test]
    fn csv_upper_triangle() {
        let k = KernelMatrix {
            label: KernelLabel::Ntk,
            values: Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 3.5]]).unwrap(),
        };
        let mut out = Vec::new();
        k.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "i,j,value\n0,0,1\n0,1,2\n1,1,3.5\n"
        );
    }
}
