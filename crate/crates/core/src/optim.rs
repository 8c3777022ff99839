//! Discrete-time SGD with optional momentum and weight decay.
//!
//! Every update is `theta -= eta(t) * u` with `eta(t) = effective_lr(eta0(t))`.
//! Momentum keeps `u` as an exponential moving average of loss gradients,
//! `u = alpha u + (1 - alpha) grad`; the velocity in the model's own units is
//! `v = -N gamma0 u`, so for the muP schemes the step reads
//! `theta += eta0 gamma0 v` and `v = alpha v - (1 - alpha) N gamma0 grad`.

use crate::error::{Error, Result};
use crate::resnet::{Network, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    LinearWarmup,
    WarmupCosine,
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::LinearWarmup => "linear_warmup",
            ScheduleKind::WarmupCosine => "warmup_cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(ScheduleKind::Constant),
            "linear_warmup" => Ok(ScheduleKind::LinearWarmup),
            "warmup_cosine" => Ok(ScheduleKind::WarmupCosine),
            _ => Err(Error::Config(format!("unknown schedule '{s}'"))),
        }
    }
}

/// Base learning rate `eta0(t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub target: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn constant(target: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            target,
            warmup_steps: 0,
            total_steps: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target >= 0.0 && self.target.is_finite()) {
            return Err(Error::Config(
                "schedule target must be finite and >= 0".into(),
            ));
        }
        if self.kind == ScheduleKind::WarmupCosine && self.total_steps <= self.warmup_steps {
            return Err(Error::Config(
                "warmup_cosine needs total_steps > warmup_steps".into(),
            ));
        }
        Ok(())
    }

    pub fn value(&self, t: u64) -> f64 {
        let ramp = |t: u64| {
            if t < self.warmup_steps {
                self.target * t as f64 / self.warmup_steps as f64
            } else {
                self.target
            }
        };
        match self.kind {
            ScheduleKind::Constant => self.target,
            ScheduleKind::LinearWarmup => ramp(t),
            ScheduleKind::WarmupCosine => {
                if t < self.warmup_steps {
                    ramp(t)
                } else if t >= self.total_steps {
                    0.0
                } else {
                    let span = (self.total_steps - self.warmup_steps) as f64;
                    let frac = (t - self.warmup_steps) as f64 / span;
                    self.target * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
                }
            }
        }
    }
}

pub fn schedule_value(s: &Schedule, t: u64) -> f64 {
    s.value(t)
}

#[derive(Debug, Clone)]
pub struct OptState {
    /// Moving average of loss gradients (gradient units).
    avg: Params,
    pub t: u64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptState {
    pub fn new(net: &Network, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be finite and >= 0".into()));
        }
        Ok(Self {
            avg: net.params.zeros_like(),
            t: 0,
            momentum,
            weight_decay,
        })
    }

    /// Velocity `v = -N gamma0 u` for the network this state was built for.
    pub fn velocity(&self, net: &Network) -> Params {
        let mut v = self.avg.clone();
        v.scale(-net.cfg().gradient_field_scale());
        v
    }
}

fn check(net: &Network, grads: &Params) -> Result<()> {
    if !net.params.same_shape(grads) {
        return Err(Error::Shape("gradients do not match the network".into()));
    }
    Ok(())
}

fn descend(net: &mut Network, dir: &Params, lr: f64) -> Result<()> {
    let cfg = net.cfg().clone();
    for ((id, w), (_, d)) in net.params.iter_mut().zip(dir.iter()) {
        if crate::resnet::is_trainable(&cfg, id) {
            w.axpy(-lr, d);
        }
    }
    if !net.params.is_finite() {
        return Err(Error::Diverged("non-finite weights after update".into()));
    }
    Ok(())
}

/// `theta -= effective_lr(eta0(t)) * grad` on every trainable tensor.
pub fn sgd_step(net: &mut Network, grads: &Params, s: &Schedule, t: u64) -> Result<()> {
    check(net, grads)?;
    let lr = net.cfg().effective_lr(s.value(t));
    descend(net, grads, lr)
}

/// Heavy-ball update; `alpha = 0` reproduces [`sgd_step`] bit for bit.
pub fn momentum_step(
    net: &mut Network,
    grads: &Params,
    state: &mut OptState,
    s: &Schedule,
    t: u64,
) -> Result<()> {
    check(net, grads)?;
    if !state.avg.same_shape(grads) {
        return Err(Error::Shape(
            "optimizer state does not match the network".into(),
        ));
    }
    let a = state.momentum;
    for ((_, u), (_, g)) in state.avg.iter_mut().zip(grads.iter()) {
        for (ui, &gi) in u.data_mut().iter_mut().zip(g.data()) {
            *ui = a * *ui + (1.0 - a) * gi;
        }
    }
    state.t += 1;
    let lr = net.cfg().effective_lr(s.value(t));
    descend(net, &state.avg, lr)
}

/// Momentum step followed by the multiplicative shrink `1 - eta0(t) lambda`.
pub fn weight_decay_step(
    net: &mut Network,
    grads: &Params,
    state: &mut OptState,
    s: &Schedule,
    t: u64,
) -> Result<()> {
    let base = s.value(t);
    let shrink = 1.0 - base * state.weight_decay;
    if base * state.weight_decay >= 1.0 {
        return Err(Error::Precondition(format!(
            "eta0 * lambda = {} >= 1 makes the decay unstable",
            base * state.weight_decay
        )));
    }
    momentum_step(net, grads, state, s, t)?;
    if state.weight_decay > 0.0 {
        let cfg = net.cfg().clone();
        for (id, w) in net.params.iter_mut() {
            if crate::resnet::is_trainable(&cfg, id) {
                w.scale_in_place(shrink);
            }
        }
    }
    Ok(())
}

/// Optimizer choice for a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSpec {
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerSpec {
    pub fn sgd(eta0: f64) -> Self {
        Self {
            schedule: Schedule::constant(eta0),
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn state(&self, net: &Network) -> Result<OptState> {
        OptState::new(net, self.momentum, self.weight_decay)
    }

    pub fn step(
        &self,
        net: &mut Network,
        grads: &Params,
        state: &mut OptState,
        t: u64,
    ) -> Result<()> {
        if self.momentum == 0.0 && self.weight_decay == 0.0 {
            state.t += 1;
            sgd_step(net, grads, &self.schedule, t)
        } else {
            weight_decay_step(net, grads, state, &self.schedule, t)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_matrix, Activation, Matrix, RngStream};
    use crate::param::{ParamConfig, Scheme};
    use crate::resnet::{backward, forward, init_network, Loss};

    fn net(scheme: Scheme) -> Network {
        let mut cfg = ParamConfig::new(8, 3, 2, scheme);
        cfg.activation = Activation::Tanh;
        init_network(&cfg, &RngStream::new(8, 1)).unwrap()
    }

    fn random_like(p: &Params, seed: u64) -> Params {
        let mut s = RngStream::new(seed, 77);
        let mut out = p.zeros_like();
        for (_, m) in out.iter_mut() {
            *m = gaussian_matrix(m.rows(), m.cols(), 1.0, &mut s);
        }
        out
    }

    #[test]
    fn schedule_shapes() {
        let lw = Schedule {
            kind: ScheduleKind::LinearWarmup,
            target: 0.1,
            warmup_steps: 1000,
            total_steps: 0,
        };
        assert_eq!(lw.value(0), 0.0);
        assert_eq!(lw.value(1000), 0.1);
        assert_eq!(lw.value(5000), 0.1);
        let wc = Schedule {
            kind: ScheduleKind::WarmupCosine,
            target: 0.1,
            warmup_steps: 100,
            total_steps: 300,
        };
        assert!((wc.value(200) - 0.05).abs() < 1e-15);
        assert_eq!(wc.value(300), 0.0);
        assert_eq!(wc.value(10_000), 0.0);
        assert_eq!(wc.value(100), 0.1);
        assert_eq!(Schedule::constant(0.3).value(12), 0.3);
    }

    #[test]
    fn zero_grads_leave_net_unchanged() {
        let mut n = net(Scheme::MuPSqrtL);
        let before = n.clone();
        let z = n.params.zeros_like();
        sgd_step(&mut n, &z, &Schedule::constant(0.5), 0).unwrap();
        assert_eq!(n, before);
    }

    #[test]
    fn scalar_quadratic_by_hand() {
        // N=1, L=1, D=1, SP, linear: f = w * (h + u h) with h = a x
        let mut cfg = ParamConfig::new(1, 1, 1, Scheme::Sp);
        cfg.activation = Activation::Linear;
        cfg.train_readin = false;
        let params = Params {
            readin: Matrix::from_rows(&[vec![1.0]]).unwrap(),
            blocks: vec![vec![Matrix::from_rows(&[vec![0.0]]).unwrap()]],
            readout: Matrix::row_vector(vec![2.0]),
        };
        let mut n = Network::from_params(cfg, params).unwrap();
        let x = Matrix::from_rows(&[vec![1.0]]).unwrap();
        // f = 2, y = 0: dL/dw = f * h = 2, dL/du = f * w * h = 4
        let t = forward(&n, &x).unwrap();
        let g = backward(&n, &t, &Loss::Mse.delta(&t.f, &[0.0]))
            .unwrap()
            .grads;
        sgd_step(&mut n, &g, &Schedule::constant(0.1), 0).unwrap();
        assert!((n.params.readout.get(0, 0) - 1.8).abs() < 1e-15);
        assert!((n.params.blocks[0][0].get(0, 0) + 0.4).abs() < 1e-15);
    }

    #[test]
    fn half_steps_match_full_step_only_when_linear() {
        let base = net(Scheme::MuPSqrtL);
        let x = Matrix::from_rows(&[vec![0.3, -0.8], vec![1.0, 0.4]]).unwrap();
        // readout-only training with fixed Delta: the loss is linear in theta
        let readout_grad = |n: &Network, delta: &[f64]| {
            let t = forward(n, &x).unwrap();
            let mut g = backward(n, &t, delta).unwrap().grads;
            let keep = g.readout.clone();
            g.scale(0.0);
            g.readout = keep;
            g
        };
        let fixed = [0.5, -1.0];
        let mut full = base.clone();
        sgd_step(
            &mut full,
            &readout_grad(&base, &fixed),
            &Schedule::constant(0.2),
            0,
        )
        .unwrap();
        let mut half = base.clone();
        for t in 0..2 {
            let g = readout_grad(&half, &fixed);
            sgd_step(&mut half, &g, &Schedule::constant(0.1), t).unwrap();
        }
        let mut d = full.params.clone();
        d.axpy(-1.0, &half.params);
        assert!(d.max_abs() < 1e-12);

        // full MSE gradient on all tensors is not linear in theta
        let y = [1.0, -1.0];
        let grad = |n: &Network| {
            let t = forward(n, &x).unwrap();
            backward(n, &t, &Loss::Mse.delta(&t.f, &y)).unwrap().grads
        };
        let mut full = base.clone();
        sgd_step(&mut full, &grad(&base), &Schedule::constant(0.2), 0).unwrap();
        let mut half = base.clone();
        for t in 0..2 {
            let g = grad(&half);
            sgd_step(&mut half, &g, &Schedule::constant(0.1), t).unwrap();
        }
        let mut d = full.params.clone();
        d.axpy(-1.0, &half.params);
        assert!(d.max_abs() > 1e-8);
    }

    #[test]
    fn zero_momentum_is_bitwise_sgd() {
        for scheme in [Scheme::Sp, Scheme::MuPSqrtL, Scheme::MuPDepthAlpha(0.8)] {
            let mut a = net(scheme);
            let mut b = a.clone();
            let mut st = OptState::new(&b, 0.0, 0.0).unwrap();
            let s = Schedule::constant(0.07);
            for t in 0..3 {
                let g = random_like(&a.params, t);
                sgd_step(&mut a, &g, &s, t).unwrap();
                momentum_step(&mut b, &g, &mut st, &s, t).unwrap();
            }
            assert_eq!(a, b);
        }
    }

    #[test]
    fn velocity_unfolds_to_geometric_sum() {
        let mut n = net(Scheme::MuPSqrtL);
        let alpha = 0.7;
        let mut st = OptState::new(&n, alpha, 0.0).unwrap();
        let s = Schedule::constant(1e-6);
        let grads: Vec<Params> = (0..6).map(|i| random_like(&n.params, i)).collect();
        for (t, g) in grads.iter().enumerate() {
            momentum_step(&mut n, g, &mut st, &s, t as u64).unwrap();
        }
        let ng = n.cfg().gradient_field_scale();
        let last = grads.len() - 1;
        let mut expect = n.params.zeros_like();
        for (s_, g) in grads.iter().enumerate() {
            expect.axpy(-(1.0 - alpha) * alpha.powi((last - s_) as i32) * ng, g);
        }
        let mut d = st.velocity(&n);
        d.axpy(-1.0, &expect);
        assert!(d.max_abs() < 1e-12 * expect.max_abs());
    }

    #[test]
    fn constant_gradient_velocity_fixed_point() {
        let mut n = net(Scheme::MuP);
        let mut st = OptState::new(&n, 0.9, 0.0).unwrap();
        let g = random_like(&n.params, 3);
        for t in 0..400 {
            momentum_step(&mut n, &g, &mut st, &Schedule::constant(1e-9), t).unwrap();
        }
        let mut d = st.velocity(&n);
        d.axpy(n.cfg().gradient_field_scale(), &g);
        assert!(d.max_abs() < 1e-12 * n.cfg().gradient_field_scale() * g.max_abs());
    }

    #[test]
    fn weight_decay_shrinks_geometrically() {
        let mut n = net(Scheme::MuPSqrtL);
        let w0 = n.params.clone();
        let (eta, lam) = (0.01, 2.0);
        let mut st = OptState::new(&n, 0.0, lam).unwrap();
        let z = n.params.zeros_like();
        let steps = 50;
        for t in 0..steps {
            weight_decay_step(&mut n, &z, &mut st, &Schedule::constant(eta), t).unwrap();
        }
        let r = n.params.blocks[1][0].get(2, 3) / w0.blocks[1][0].get(2, 3);
        assert!((r - (1.0 - eta * lam).powi(steps as i32)).abs() < 1e-12);
        // Euler vs continuous decay: O(eta lambda) per unit time
        let cont = (-eta * lam * steps as f64).exp();
        assert!((r - cont).abs() < eta * lam * steps as f64 * eta * lam);
    }

    #[test]
    fn weight_decay_zero_is_sgd_and_guard_trips() {
        let mut a = net(Scheme::MuPSqrtL);
        let mut b = a.clone();
        let g = random_like(&a.params, 1);
        let s = Schedule::constant(0.02);
        let mut st = OptState::new(&b, 0.0, 0.0).unwrap();
        sgd_step(&mut a, &g, &s, 0).unwrap();
        weight_decay_step(&mut b, &g, &mut st, &s, 0).unwrap();
        assert_eq!(a, b);
        let mut st = OptState::new(&b, 0.0, 100.0).unwrap();
        assert!(weight_decay_step(&mut b, &g, &mut st, &s, 0).is_err());
    }

    #[test]
    fn non_finite_update_flags_divergence() {
        let mut n = net(Scheme::MuPSqrtL);
        let mut g = n.params.zeros_like();
        g.readout.set(0, 0, f64::INFINITY);
        assert!(matches!(
            sgd_step(&mut n, &g, &Schedule::constant(0.1), 0),
            Err(Error::Diverged(_))
        ));
    }
}
