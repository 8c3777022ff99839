use super::{Network, Params, TensorId};
use crate::error::{Error, Result};
use crate::numerics::{gemm, Activation, Matrix, Trans};
use crate::param::ReadoutInput;

/// Outputs beyond this magnitude count as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// `(1/P) sum_p (f_p - y_p)^2 / 2`
    Mse,
}

impl Loss {
    pub fn value(&self, f: &[f64], y: &[f64]) -> f64 {
        match self {
            Loss::Mse => {
                let s: f64 = f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                0.5 * s / f.len() as f64
            }
        }
    }

    /// Per-sample error `Delta = -dL_p/df_p`.
    pub fn delta(&self, f: &[f64], y: &[f64]) -> Vec<f64> {
        match self {
            Loss::Mse => y.iter().zip(f).map(|(a, b)| a - b).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Inputs, `P x D`.
    pub x: Matrix,
    /// `h[l]` holds `h^{l+1}`, `l = 0..=L`; each `P x N`.
    pub h: Vec<Matrix>,
    /// `internal[l][k-1]` holds `t^{l,k}`, `k = 1..K-1`.
    pub internal: Vec<Vec<Matrix>>,
    pub f: Vec<f64>,
    pub diverged: bool,
    pub activation: Activation,
    pub readout_input: ReadoutInput,
}

impl ForwardTrace {
    pub fn batch(&self) -> usize {
        self.x.rows()
    }

    /// Rows fed to the read-out vector.
    pub fn readout_features(&self) -> Matrix {
        let top = self.h.last().unwrap();
        match self.readout_input {
            ReadoutInput::Activation => activate(self.activation, top),
            ReadoutInput::Stream => top.clone(),
        }
    }

    /// Residual update of block `l`, `h^{l+2} - h^{l+1}` in 1-based terms.
    pub fn branch_output(&self, layer: usize) -> Matrix {
        let mut d = self.h[layer + 1].clone();
        d.axpy(-1.0, &self.h[layer]);
        d
    }
}

#[derive(Debug, Clone)]
pub struct BackwardTrace {
    /// `g[l] = N gamma0 df/dh^{l+1}` per sample, `l = 0..=L`.
    pub g: Vec<Matrix>,
    /// `g_internal[l][k-1] = N gamma0 sqrt(L) df/dt^{l,k}`.
    pub g_internal: Vec<Vec<Matrix>>,
    /// Loss gradient per tensor; zero for frozen tensors.
    pub grads: Params,
}

pub fn activate(act: Activation, m: &Matrix) -> Matrix {
    match act {
        Activation::Linear => m.clone(),
        _ => m.map(|v| act.value(v)),
    }
}

fn act_derivative(act: Activation, m: &Matrix) -> Matrix {
    m.map(|v| act.derivative(v))
}

fn readout_input(net: &Network, top: &Matrix) -> Matrix {
    match net.cfg().readout_input {
        ReadoutInput::Activation => activate(net.cfg().activation, top),
        ReadoutInput::Stream => top.clone(),
    }
}

/// Evaluate the network on the rows of `x` and keep every preactivation.
pub fn forward(net: &Network, x: &Matrix) -> Result<ForwardTrace> {
    let cfg = net.cfg();
    if x.cols() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            cfg.input_dim
        )));
    }
    let (p, n, k) = (x.rows(), cfg.width, cfg.layers_per_block);
    let act = cfg.activation;
    let beta = cfg.hidden_scale();
    let s = cfg.internal_scale();

    let mut h1 = Matrix::zeros(p, n);
    gemm(
        cfg.readin_scale(),
        x,
        Trans::No,
        &net.params.readin,
        Trans::Yes,
        0.0,
        &mut h1,
    );
    let mut h = Vec::with_capacity(cfg.depth + 1);
    h.push(h1);
    let mut internal = Vec::with_capacity(cfg.depth);
    for block in &net.params.blocks {
        let cur = h.last().unwrap();
        let mut next = cur.clone();
        let mut ts = Vec::with_capacity(k - 1);
        let mut input = activate(act, cur);
        for (j, w) in block.iter().enumerate() {
            if j + 1 == k {
                gemm(beta, &input, Trans::No, w, Trans::Yes, 1.0, &mut next);
            } else {
                let mut t = Matrix::zeros(p, n);
                gemm(s, &input, Trans::No, w, Trans::Yes, 0.0, &mut t);
                input = activate(act, &t);
                ts.push(t);
            }
        }
        internal.push(ts);
        h.push(next);
    }
    let top = readout_input(net, h.last().unwrap());
    let coef = cfg.readout_scale() / cfg.output_scale();
    let f = top
        .matvec(net.params.readout.row(0))
        .into_iter()
        .map(|v| coef * v)
        .collect::<Vec<_>>();
    let diverged = f
        .iter()
        .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD)
        || h.iter().any(|m| !m.is_finite())
        || internal.iter().flatten().any(|m| !m.is_finite());
    Ok(ForwardTrace {
        x: x.clone(),
        h,
        internal,
        f,
        diverged,
        activation: act,
        readout_input: cfg.readout_input,
    })
}

/// Rows of `m` scaled by `c`.
fn scale_rows(m: &Matrix, c: &[f64]) -> Matrix {
    let mut out = m.clone();
    for (i, &ci) in c.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|v| *v *= ci);
    }
    out
}

/// Back-propagate from the outputs of `trace`.
///
/// `delta[p] = -dL/df_p`; the returned gradient is
/// `-(1/P) sum_p delta[p] df_p/dtheta`.
pub fn backward(net: &Network, trace: &ForwardTrace, delta: &[f64]) -> Result<BackwardTrace> {
    backward_impl(net, trace, Some(delta))
}

/// Gradient fields only; `grads` is left at zero.
pub fn backward_fields(net: &Network, trace: &ForwardTrace) -> Result<BackwardTrace> {
    backward_impl(net, trace, None)
}

fn backward_impl(
    net: &Network,
    trace: &ForwardTrace,
    delta: Option<&[f64]>,
) -> Result<BackwardTrace> {
    let cfg = net.cfg();
    if trace.diverged {
        return Err(Error::Diverged(
            "cannot back-propagate a divergent forward pass".into(),
        ));
    }
    let p = trace.batch();
    let with_grads = delta.is_some();
    let delta = delta.unwrap_or(&[]);
    if (with_grads && delta.len() != p) || trace.h.len() != cfg.depth + 1 {
        return Err(Error::Shape(
            "trace or delta does not match the network".into(),
        ));
    }
    let (n, k, depth) = (cfg.width, cfg.layers_per_block, cfg.depth);
    let act = cfg.activation;
    let beta = cfg.hidden_scale();
    let s = cfg.internal_scale();
    let field = cfg.gradient_field_scale();
    let field_internal = field * (depth as f64).sqrt();
    let weights: Vec<f64> = delta.iter().map(|d| -d / p as f64).collect();
    let mut grads = net.params.zeros_like();

    // df/dh^{L+1}
    let top = &trace.h[depth];
    let coef = cfg.readout_scale() / cfg.output_scale();
    let w = net.params.readout.row(0);
    let mut d = Matrix::zeros(p, n);
    for i in 0..p {
        let row = d.row_mut(i);
        match cfg.readout_input {
            ReadoutInput::Activation => {
                for ((r, &wj), &hj) in row.iter_mut().zip(w).zip(top.row(i)) {
                    *r = coef * wj * act.derivative(hj);
                }
            }
            ReadoutInput::Stream => {
                for (r, &wj) in row.iter_mut().zip(w) {
                    *r = coef * wj;
                }
            }
        }
    }
    if with_grads && cfg.train_readout {
        let inp = readout_input(net, top);
        let gw = inp.matvec_t(&weights);
        for (g, v) in grads.readout.row_mut(0).iter_mut().zip(gw) {
            *g = coef * v;
        }
    }

    let mut g = vec![Matrix::zeros(0, 0); depth + 1];
    let mut g_internal: Vec<Vec<Matrix>> = vec![Vec::new(); depth];
    g[depth] = scaled(&d, field);
    for layer in (0..depth).rev() {
        let block = &net.params.blocks[layer];
        let mut cur = d.clone();
        let mut gi = vec![Matrix::zeros(0, 0); k - 1];
        for j in (0..k).rev() {
            let pre = if j == 0 {
                &trace.h[layer]
            } else {
                &trace.internal[layer][j - 1]
            };
            let c = if j + 1 == k { beta } else { s };
            if with_grads {
                let a = activate(act, pre);
                gemm(
                    c,
                    &scale_rows(&cur, &weights),
                    Trans::Yes,
                    &a,
                    Trans::No,
                    0.0,
                    &mut grads.blocks[layer][j],
                );
            }
            let mut back = Matrix::zeros(p, n);
            gemm(c, &cur, Trans::No, &block[j], Trans::No, 0.0, &mut back);
            let dphi = act_derivative(act, pre);
            back = back.hadamard(&dphi);
            if j == 0 {
                d.axpy(1.0, &back);
            } else {
                gi[j - 1] = scaled(&back, field_internal);
                cur = back;
            }
        }
        g_internal[layer] = gi;
        g[layer] = scaled(&d, field);
    }
    if with_grads && cfg.train_readin {
        gemm(
            cfg.readin_scale(),
            &scale_rows(&d, &weights),
            Trans::Yes,
            &trace.x,
            Trans::No,
            0.0,
            &mut grads.readin,
        );
    }
    let bt = BackwardTrace {
        g,
        g_internal,
        grads,
    };
    if !bt.grads.is_finite() || bt.g.iter().any(|m| !m.is_finite()) {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    Ok(bt)
}

fn scaled(m: &Matrix, c: f64) -> Matrix {
    let mut out = m.clone();
    out.scale_in_place(c);
    out
}

/// Central-difference gradient of the batch loss for every trainable tensor.
pub fn finite_diff_grad(
    net: &Network,
    x: &Matrix,
    y: &[f64],
    loss: Loss,
    epsilon: f64,
) -> Result<Params> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Precondition(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let mut work = net.clone();
    let mut out = net.params.zeros_like();
    let ids: Vec<TensorId> = net.params.iter().map(|(id, _)| id).collect();
    let eval = |w: &Network| -> Result<f64> { Ok(loss.value(&forward(w, x)?.f, y)) };
    for id in ids {
        if !net.is_trainable(id) {
            continue;
        }
        let len = net.params.get(id).data().len();
        for e in 0..len {
            let orig = net.params.get(id).data()[e];
            work.params.get_mut(id).data_mut()[e] = orig + epsilon;
            let up = eval(&work)?;
            work.params.get_mut(id).data_mut()[e] = orig - epsilon;
            let down = eval(&work)?;
            work.params.get_mut(id).data_mut()[e] = orig;
            out.get_mut(id).data_mut()[e] = (up - down) / (2.0 * epsilon);
        }
    }
    Ok(out)
}

/// Largest entrywise relative difference between two gradient sets.
///
/// Entries are compared as `|a - b| / max(|a|, |b|, floor)` with
/// `floor = 1e-3 * max|b|`, so values that are pure round-off next to the
/// tensor's scale are not amplified.
pub fn gradient_relative_error(a: &Params, b: &Params) -> f64 {
    let scale = b.max_abs().max(a.max_abs());
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for ((_, ma), (_, mb)) in a.iter().zip(b.iter()) {
        for (&x, &y) in ma.data().iter().zip(mb.data()) {
            let den = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / den);
        }
    }
    worst
}
