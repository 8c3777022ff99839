//! Evaluators that regenerate weight rows from a [`WeightSource`] instead
//! of storing `N x N` matrices. One layer per block only.

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Activation, Matrix, RngStream};
use crate::observables::{ntk_from_traces, KernelMatrix};
use crate::param::{ParamConfig, ReadoutInput};
use crate::resnet::{
    activate_matrix, BackwardTrace, ForwardTrace, Loss, Params, WeightSource, DIVERGENCE_THRESHOLD,
};

fn check(cfg: &ParamConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.layers_per_block != 1 {
        return Err(Error::Config(
            "streaming evaluators need one layer per block".into(),
        ));
    }
    Ok(())
}

struct RowGen<'a> {
    src: &'a WeightSource,
    row: Vec<f64>,
    scratch: Vec<f64>,
    std: f64,
}

impl<'a> RowGen<'a> {
    fn new(cfg: &ParamConfig, src: &'a WeightSource) -> Self {
        Self {
            src,
            row: vec![0.0; cfg.width],
            scratch: vec![0.0; cfg.width],
            std: cfg.variance_unchecked(false).sqrt(),
        }
    }

    fn fill(&mut self, layer: usize, i: usize) -> &[f64] {
        self.src
            .block_row(&mut self.row, &mut self.scratch, self.std, layer, 0, i);
        &self.row
    }
}

fn readin_rows(cfg: &ParamConfig, src: &WeightSource) -> Matrix {
    let mut w = Matrix::zeros(cfg.width, cfg.input_dim);
    let std = cfg.variance_unchecked(true).sqrt();
    for i in 0..cfg.width {
        src.readin_row(w.row_mut(i), std, i);
    }
    w
}

fn readout_row(cfg: &ParamConfig, src: &WeightSource) -> Vec<f64> {
    let mut w = vec![0.0; cfg.width];
    src.readout_row(&mut w, cfg.variance_unchecked(false).sqrt());
    w
}

fn features(cfg: &ParamConfig, h: &Matrix) -> Matrix {
    match cfg.readout_input {
        ReadoutInput::Activation => activate_matrix(cfg.activation, h),
        ReadoutInput::Stream => h.clone(),
    }
}

/// `next[p] += c * W^{layer} a[p]` for every row of `a`.
fn add_branch(gen: &mut RowGen, layer: usize, c: f64, a: &Matrix, next: &mut Matrix) {
    let n = a.cols();
    for i in 0..n {
        let row = gen.fill(layer, i);
        for p in 0..a.rows() {
            let v = next.get(p, i) + c * dot(row, a.row(p));
            next.set(p, i, v);
        }
    }
}

fn is_diverged(h: &[Matrix], f: &[f64]) -> bool {
    f.iter()
        .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD)
        || h.iter().any(|m| !m.is_finite())
}

/// Same result as `forward` on `init_network_coupled(cfg, stream, fine_depth)`,
/// up to summation order.
pub fn streaming_forward(
    cfg: &ParamConfig,
    src: &WeightSource,
    x: &Matrix,
) -> Result<ForwardTrace> {
    check(cfg)?;
    if x.cols() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            cfg.input_dim
        )));
    }
    let (p, n) = (x.rows(), cfg.width);
    let act = cfg.activation;
    let w0 = readin_rows(cfg, src);
    let b0 = cfg.readin_scale();
    let mut h1 = Matrix::zeros(p, n);
    for s in 0..p {
        for i in 0..n {
            h1.set(s, i, b0 * dot(w0.row(i), x.row(s)));
        }
    }
    let mut h = vec![h1];
    let beta = cfg.hidden_scale();
    let mut gen = RowGen::new(cfg, src);
    for layer in 0..cfg.depth {
        let cur = h.last().unwrap();
        let mut next = cur.clone();
        if !cfg.zero_block_readout {
            let a = activate_matrix(act, cur);
            add_branch(&mut gen, layer, beta, &a, &mut next);
        }
        h.push(next);
    }
    let w = readout_row(cfg, src);
    let coef = cfg.readout_scale() / cfg.output_scale();
    let feats = features(cfg, h.last().unwrap());
    let f: Vec<f64> = (0..p).map(|s| coef * dot(&w, feats.row(s))).collect();
    let diverged = is_diverged(&h, &f);
    Ok(ForwardTrace {
        x: x.clone(),
        h,
        internal: vec![Vec::new(); cfg.depth],
        f,
        diverged,
        activation: act,
        readout_input: cfg.readout_input,
    })
}

fn empty_params() -> Params {
    Params {
        readin: Matrix::zeros(0, 0),
        blocks: Vec::new(),
        readout: Matrix::zeros(0, 0),
    }
}

/// Gradient fields `g^l` for a streaming forward trace. `grads` is empty.
pub fn streaming_backward_fields(
    cfg: &ParamConfig,
    src: &WeightSource,
    fwd: &ForwardTrace,
) -> Result<BackwardTrace> {
    check(cfg)?;
    if fwd.diverged {
        return Err(Error::Diverged(
            "cannot back-propagate a divergent forward pass".into(),
        ));
    }
    if fwd.h.len() != cfg.depth + 1 {
        return Err(Error::Shape(
            "trace does not match the configuration".into(),
        ));
    }
    let (p, n) = (fwd.batch(), cfg.width);
    let act = cfg.activation;
    let w = readout_row(cfg, src);
    let coef = cfg.readout_scale() / cfg.output_scale();
    let field = cfg.gradient_field_scale();
    let mut d = Matrix::zeros(p, n);
    let top = &fwd.h[cfg.depth];
    for s in 0..p {
        for i in 0..n {
            let v = match cfg.readout_input {
                ReadoutInput::Activation => coef * w[i] * act.derivative(top.get(s, i)),
                ReadoutInput::Stream => coef * w[i],
            };
            d.set(s, i, v);
        }
    }
    let mut g = vec![Matrix::zeros(0, 0); cfg.depth + 1];
    g[cfg.depth] = scaled(&d, field);
    let beta = cfg.hidden_scale();
    let mut gen = RowGen::new(cfg, src);
    for layer in (0..cfg.depth).rev() {
        if !cfg.zero_block_readout {
            let mut back = Matrix::zeros(p, n);
            for i in 0..n {
                let row = gen.fill(layer, i);
                for s in 0..p {
                    let c = beta * d.get(s, i);
                    if c != 0.0 {
                        axpy(back.row_mut(s), c, row);
                    }
                }
            }
            let pre = &fwd.h[layer];
            for s in 0..p {
                for i in 0..n {
                    let v = d.get(s, i) + back.get(s, i) * act.derivative(pre.get(s, i));
                    d.set(s, i, v);
                }
            }
        }
        g[layer] = scaled(&d, field);
    }
    if g.iter().any(|m| !m.is_finite()) {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    Ok(BackwardTrace {
        g,
        g_internal: vec![Vec::new(); cfg.depth],
        grads: empty_params(),
    })
}

fn scaled(m: &Matrix, c: f64) -> Matrix {
    let mut out = m.clone();
    out.scale_in_place(c);
    out
}

/// Kernel-sum NTK at initialization without storing the hidden weights.
pub fn streaming_ntk(cfg: &ParamConfig, src: &WeightSource, x: &Matrix) -> Result<KernelMatrix> {
    let fwd = streaming_forward(cfg, src, x)?;
    let back = streaming_backward_fields(cfg, src, &fwd)?;
    ntk_from_traces(cfg, &fwd, &back)
}

/// Preactivations before and after one full-batch SGD step from
/// initialization.
#[derive(Debug, Clone)]
pub struct OneStep {
    pub before: ForwardTrace,
    /// `h^{l+1}` after the step, `l = 0..=L`.
    pub after: Vec<Matrix>,
    pub f_after: Vec<f64>,
}

/// One step of `sgd_step` with constant `eta0` on `(x, y)`, evaluated
/// on the same inputs. Every weight update is rank `P`, so the new
/// branch outputs are the old ones plus a correction built from the
/// stored fields.
pub fn streaming_one_step(
    cfg: &ParamConfig,
    src: &WeightSource,
    x: &Matrix,
    y: &[f64],
    eta0: f64,
) -> Result<OneStep> {
    if y.len() != x.rows() {
        return Err(Error::Shape("targets do not match the batch".into()));
    }
    let before = streaming_forward(cfg, src, x)?;
    let back = streaming_backward_fields(cfg, src, &before)?;
    let (p, n) = (x.rows(), cfg.width);
    let act = cfg.activation;
    let lr = cfg.effective_lr(eta0);
    let field = cfg.gradient_field_scale();
    let c: Vec<f64> = Loss::Mse
        .delta(&before.f, y)
        .into_iter()
        .map(|v| v / p as f64)
        .collect();

    // Row `s` of the result: sum_q c_q m(q, s) d_q, with d = g / field.
    let correction = |m: &Matrix, g: &Matrix, scale: f64| -> Matrix {
        let mut out = Matrix::zeros(p, n);
        for s in 0..p {
            for q in 0..p {
                let w = scale * c[q] * m.get(q, s) / field;
                if w != 0.0 {
                    axpy(out.row_mut(s), w, g.row(q));
                }
            }
        }
        out
    };
    let cross = |a: &Matrix, b: &Matrix| -> Matrix {
        let mut m = Matrix::zeros(p, p);
        for q in 0..p {
            for s in 0..p {
                m.set(q, s, dot(a.row(q), b.row(s)));
            }
        }
        m
    };

    let mut h1 = before.h[0].clone();
    if cfg.train_readin {
        let b0 = cfg.readin_scale();
        h1.axpy(1.0, &correction(&cross(x, x), &back.g[0], lr * b0 * b0));
    }
    let mut after = vec![h1];
    let beta = cfg.hidden_scale();
    let mut gen = RowGen::new(cfg, src);
    for layer in 0..cfg.depth {
        let cur = after.last().unwrap();
        let a_new = activate_matrix(act, cur);
        let mut next = cur.clone();
        if !cfg.zero_block_readout {
            add_branch(&mut gen, layer, beta, &a_new, &mut next);
        }
        let a_old = activate_matrix(act, &before.h[layer]);
        next.axpy(
            1.0,
            &correction(&cross(&a_old, &a_new), &back.g[layer + 1], lr * beta * beta),
        );
        after.push(next);
    }

    let coef = cfg.readout_scale() / cfg.output_scale();
    let mut w = readout_row(cfg, src);
    if cfg.train_readout {
        let old = features(cfg, &before.h[cfg.depth]);
        for (q, &cq) in c.iter().enumerate() {
            axpy(&mut w, lr * coef * cq, old.row(q));
        }
    }
    let feats = features(cfg, after.last().unwrap());
    let f_after: Vec<f64> = (0..p).map(|s| coef * dot(&w, feats.row(s))).collect();
    if is_diverged(&after, &f_after) {
        return Err(Error::Diverged("one-step update left finite range".into()));
    }
    Ok(OneStep {
        before,
        after,
        f_after,
    })
}

/// Gradient kernel profile `G^l = |g^l|^2 / N`, `l = 1..=L+1`, of a deep
/// linear network at initialization with a frozen read-out, for one input.
///
/// `W^l` is independent of `g^{l+1}`, so `W^T g` has the law of
/// `sigma |g| z` with `z` standard normal; the recursion
/// `g^l = g^{l+1} + beta sigma |g^{l+1}| z^l` samples the finite network
/// exactly in distribution at `O(N L)` cost.
pub fn linear_gradient_profile_sampled(cfg: &ParamConfig, stream: &RngStream) -> Result<Vec<f64>> {
    check(cfg)?;
    if cfg.activation != Activation::Linear {
        return Err(Error::Config(
            "gradient profile sampler is exact for linear networks only".into(),
        ));
    }
    let n = cfg.width;
    let sigma = cfg.variance_unchecked(false).sqrt();
    let coef = cfg.readout_scale() / cfg.output_scale();
    let field = cfg.gradient_field_scale();
    let mut ws = stream.substream(0);
    let mut g: Vec<f64> = (0..n).map(|_| field * coef * sigma * ws.normal()).collect();
    let beta = if cfg.zero_block_readout {
        0.0
    } else {
        cfg.hidden_scale()
    };
    let norm2 = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>();
    let mut out = vec![0.0; cfg.depth + 1];
    out[cfg.depth] = norm2(&g) / n as f64;
    for layer in (0..cfg.depth).rev() {
        let mut zs = stream.substream(1 + layer as u64);
        let s = beta * sigma * norm2(&g).sqrt();
        for v in g.iter_mut() {
            *v += s * zs.normal();
        }
        out[layer] = norm2(&g) / n as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::ntk_kernel_sum;
    use crate::optim::{sgd_step, Schedule};
    use crate::param::Scheme;
    use crate::resnet::{backward, backward_fields, forward, init_network_coupled};

    fn sample(p: usize, d: usize, seed: u64) -> Matrix {
        let mut s = RngStream::new(seed, 3);
        crate::numerics::gaussian_matrix(p, d, 1.0, &mut s)
    }

    fn configs() -> Vec<ParamConfig> {
        let mut out = Vec::new();
        for scheme in [Scheme::Sp, Scheme::MuP, Scheme::MuPSqrtL] {
            for (act, ro, tr) in [
                (Activation::Relu, ReadoutInput::Activation, true),
                (Activation::Tanh, ReadoutInput::Stream, false),
                (Activation::Linear, ReadoutInput::Activation, true),
            ] {
                let mut c = ParamConfig::new(12, 4, 3, scheme);
                c.activation = act;
                c.readout_input = ro;
                c.train_readin = tr;
                c.train_readout = !tr;
                out.push(c);
            }
        }
        out
    }

    fn close(a: &Matrix, b: &Matrix, tol: f64) {
        let scale = a.max_abs().max(1e-300);
        let mut diff = a.clone();
        diff.axpy(-1.0, b);
        assert!(
            diff.max_abs() / scale < tol,
            "{} vs {}",
            diff.max_abs(),
            scale
        );
    }

    #[test]
    fn matches_stored_network() {
        let x = sample(3, 3, 1);
        for cfg in configs() {
            for fine in [4, 8] {
                let stream = RngStream::new(11, 2);
                let net = init_network_coupled(&cfg, &stream, fine).unwrap();
                let src = WeightSource::new(&cfg, &stream, fine).unwrap();
                let a = forward(&net, &x).unwrap();
                let b = streaming_forward(&cfg, &src, &x).unwrap();
                for (ha, hb) in a.h.iter().zip(&b.h) {
                    close(ha, hb, 1e-12);
                }
                let ga = backward_fields(&net, &a).unwrap();
                let gb = streaming_backward_fields(&cfg, &src, &b).unwrap();
                for (x1, x2) in ga.g.iter().zip(&gb.g) {
                    close(x1, x2, 1e-12);
                }
                let ka = ntk_kernel_sum(&net, &a, &ga).unwrap();
                let kb = streaming_ntk(&cfg, &src, &x).unwrap();
                assert!(ka.relative_difference(&kb) < 1e-12);
            }
        }
    }

    #[test]
    fn one_step_matches_explicit_update() {
        let x = sample(3, 3, 2);
        let y = [0.7, -1.1, 0.3];
        for mut cfg in configs() {
            cfg.gamma0 = 0.8;
            let stream = RngStream::new(5, 9);
            let mut net = init_network_coupled(&cfg, &stream, 4).unwrap();
            let src = WeightSource::new(&cfg, &stream, 4).unwrap();
            let eta0 = 0.05;
            let t = forward(&net, &x).unwrap();
            let delta = Loss::Mse.delta(&t.f, &y);
            let b = backward(&net, &t, &delta).unwrap();
            sgd_step(&mut net, &b.grads, &Schedule::constant(eta0), 0).unwrap();
            let after = forward(&net, &x).unwrap();
            let s = streaming_one_step(&cfg, &src, &x, &y, eta0).unwrap();
            for (ha, hb) in after.h.iter().zip(&s.after) {
                close(ha, hb, 1e-10);
            }
            let fa = Matrix::row_vector(after.f.clone());
            close(&fa, &Matrix::row_vector(s.f_after.clone()), 1e-10);
        }
    }

    #[test]
    fn rejects_multi_layer_blocks() {
        let mut cfg = ParamConfig::new(4, 2, 2, Scheme::MuPSqrtL);
        cfg.layers_per_block = 2;
        let src = WeightSource::new(&cfg, &RngStream::new(0, 0), 2).unwrap();
        assert!(streaming_forward(&cfg, &src, &sample(1, 2, 0)).is_err());
    }

    /// The projection sampler and explicit networks draw from one law:
    /// compare mean and spread of `G^l` over independent seeds.
    #[test]
    fn projection_sampler_matches_explicit_networks() {
        let mut cfg = ParamConfig::new(48, 8, 4, Scheme::MuPSqrtL);
        cfg.activation = Activation::Linear;
        cfg.readout_input = ReadoutInput::Stream;
        cfg.train_readin = false;
        cfg.train_readout = false;
        let seeds = 400;
        let x = {
            let mut m = sample(1, 4, 7);
            let s = (4.0 / m.sum_squares()).sqrt();
            m.scale_in_place(s);
            m
        };
        let mut explicit = vec![Vec::new(); cfg.depth + 1];
        let mut reduced = vec![Vec::new(); cfg.depth + 1];
        for seed in 0..seeds {
            let stream = RngStream::new(100 + seed, 0);
            let src = WeightSource::new(&cfg, &stream, cfg.depth).unwrap();
            let f = streaming_forward(&cfg, &src, &x).unwrap();
            let b = streaming_backward_fields(&cfg, &src, &f).unwrap();
            let r = linear_gradient_profile_sampled(&cfg, &RngStream::new(900 + seed, 0)).unwrap();
            for l in 0..=cfg.depth {
                explicit[l].push(b.g[l].sum_squares() / cfg.width as f64);
                reduced[l].push(r[l]);
            }
        }
        for l in 0..=cfg.depth {
            let (ma, va) = crate::observables::scalar_stats(&explicit[l]).unwrap();
            let (mb, vb) = crate::observables::scalar_stats(&reduced[l]).unwrap();
            let se = ((va + vb) / seeds as f64).sqrt();
            assert!(
                (ma - mb).abs() < 4.0 * se,
                "layer {l}: {ma} vs {mb} (se {se})"
            );
            assert!((va / vb - 1.0).abs() < 0.35, "layer {l}: var {va} vs {vb}");
        }
    }
}
