//! Infinite-width, infinite-depth kernels in the lazy regime and the
//! closed-form deep linear profiles.
//!
//! The lazy system per sample pair is
//!
//! ```text
//! dH/dtau = Phi(H)                      H(0) = Kx
//! dG/dtau = -G <phi'(h) phi'(h')>_H     G(1) = 1
//! K       = int_0^1 G Phi dtau
//! ```

use std::f64::consts::E;
use std::io::Write;

use crate::error::{Error, Result};
use crate::numerics::{dphi_pair_mean, phi_pair_mean, Activation, Matrix, PairCovariance};
use crate::observables::{KernelLabel, KernelMatrix};

pub const DEFAULT_GRID_STEPS: usize = 512;

/// Uniform layer-time grid `tau_m = m / M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerTimeGrid {
    steps: usize,
}

impl LayerTimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Precondition(format!(
                "grid needs M >= 2, got {steps}"
            )));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn tau(&self, m: usize) -> f64 {
        m as f64 / self.steps as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|m| self.tau(m)).collect()
    }
}

impl Default for LayerTimeGrid {
    fn default() -> Self {
        Self {
            steps: DEFAULT_GRID_STEPS,
        }
    }
}

fn pair_cov(hxx: f64, hxy: f64, hyy: f64, tau: f64) -> Result<PairCovariance> {
    PairCovariance::new(hxx, hxy, hyy).map_err(|e| Error::NotPsd {
        tau,
        detail: e.to_string(),
    })
}

fn check_kernel(k: &KernelMatrix) -> Result<()> {
    let p = k.size();
    if k.values.cols() != p || p == 0 {
        return Err(Error::Shape("kernel must be square and non-empty".into()));
    }
    if k.max_asymmetry() > 1e-10 {
        return Err(Error::Precondition("kernel is not symmetric".into()));
    }
    for i in 0..p {
        for j in 0..i {
            pair_cov(k.get(i, i), k.get(i, j), k.get(j, j), 0.0)?;
        }
    }
    Ok(())
}

/// Forward profile: `H(tau)` and `Phi(tau)` on every grid node.
///
/// Diagonals are integrated first with classical RK4; their stage values
/// are kept and reused by every off-diagonal pair, so each pair sees the
/// variances it would see in the joint three-dimensional system.
pub fn lazy_forward_ode(
    act: Activation,
    kx: &KernelMatrix,
    grid: LayerTimeGrid,
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    check_kernel(kx)?;
    let p = kx.size();
    let m = grid.steps();
    let dt = grid.dt();
    let mut h = vec![Matrix::zeros(p, p); m + 1];
    let mut phi = vec![Matrix::zeros(p, p); m + 1];
    h[0] = kx.values.clone();

    // stages[i][step] = diagonal value fed to RK4 stages 2, 3, 4
    let mut stages = vec![vec![[0.0; 3]; m]; p];
    for i in 0..p {
        let f = |v: f64, tau: f64| -> Result<f64> { phi_pair_mean(act, pair_cov(v, v, v, tau)?) };
        let mut y = kx.get(i, i);
        for step in 0..m {
            let tau = grid.tau(step);
            let k1 = f(y, tau)?;
            let y2 = y + 0.5 * dt * k1;
            let k2 = f(y2, tau + 0.5 * dt)?;
            let y3 = y + 0.5 * dt * k2;
            let k3 = f(y3, tau + 0.5 * dt)?;
            let y4 = y + dt * k3;
            let k4 = f(y4, tau + dt)?;
            stages[i][step] = [y2, y3, y4];
            phi[step].set(i, i, k1);
            y += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            h[step + 1].set(i, i, y);
        }
        phi[m].set(i, i, f(y, 1.0)?);
    }
    for i in 0..p {
        for j in 0..i {
            let f = |a: f64, c: f64, b: f64, tau: f64| -> Result<f64> {
                phi_pair_mean(act, pair_cov(a, c, b, tau)?)
            };
            let mut y = kx.get(i, j);
            for step in 0..m {
                let tau = grid.tau(step);
                let (si, sj) = (stages[i][step], stages[j][step]);
                let k1 = f(h[step].get(i, i), y, h[step].get(j, j), tau)?;
                let k2 = f(si[0], y + 0.5 * dt * k1, sj[0], tau + 0.5 * dt)?;
                let k3 = f(si[1], y + 0.5 * dt * k2, sj[1], tau + 0.5 * dt)?;
                let k4 = f(si[2], y + dt * k3, sj[2], tau + dt)?;
                phi[step].set(i, j, k1);
                phi[step].set(j, i, k1);
                y += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                h[step + 1].set(i, j, y);
                h[step + 1].set(j, i, y);
            }
            let last = f(h[m].get(i, i), y, h[m].get(j, j), 1.0)?;
            phi[m].set(i, j, last);
            phi[m].set(j, i, last);
        }
    }
    Ok((h, phi))
}

/// Cubic Hermite midpoint from node values and slopes.
fn hermite_mid(y0: f64, d0: f64, y1: f64, d1: f64, dt: f64) -> f64 {
    0.5 * (y0 + y1) + dt * (d0 - d1) / 8.0
}

/// Backward profile `G(tau)` from `H(tau)` and its slope `Phi(tau)`,
/// integrated from `tau = 1` down with `G(1) = 1`.
///
/// RK4 needs the derivative coefficient at half steps; `H` there comes from
/// cubic Hermite interpolation, which keeps the scheme fourth order.
pub fn lazy_backward_ode(
    act: Activation,
    h: &[Matrix],
    phi: &[Matrix],
    grid: LayerTimeGrid,
) -> Result<Vec<Matrix>> {
    let m = grid.steps();
    if h.len() != m + 1 || phi.len() != m + 1 {
        return Err(Error::Shape("profiles do not match the grid".into()));
    }
    let p = h[0].rows();
    let dt = grid.dt();
    let mut g = vec![Matrix::zeros(p, p); m + 1];
    for i in 0..p {
        for j in 0..=i {
            let coef = |step: usize| -> Result<f64> {
                let hh = &h[step];
                dphi_pair_mean(
                    act,
                    pair_cov(hh.get(i, i), hh.get(i, j), hh.get(j, j), grid.tau(step))?,
                )
            };
            let mid = |step: usize| -> Result<f64> {
                let e = |a: usize, b: usize| {
                    hermite_mid(
                        h[step].get(a, b),
                        phi[step].get(a, b),
                        h[step + 1].get(a, b),
                        phi[step + 1].get(a, b),
                        dt,
                    )
                };
                let tau = grid.tau(step) + 0.5 * dt;
                dphi_pair_mean(act, pair_cov(e(i, i), e(i, j), e(j, j), tau)?)
            };
            let mut y = 1.0;
            g[m].set(i, j, y);
            g[m].set(j, i, y);
            let mut c_hi = coef(m)?;
            for step in (0..m).rev() {
                // integrate in s = 1 - tau: dG/ds = c G
                let c_mid = mid(step)?;
                let c_lo = coef(step)?;
                let k1 = c_hi * y;
                let k2 = c_mid * (y + 0.5 * dt * k1);
                let k3 = c_mid * (y + 0.5 * dt * k2);
                let k4 = c_lo * (y + dt * k3);
                y += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                g[step].set(i, j, y);
                g[step].set(j, i, y);
                c_hi = c_lo;
            }
        }
    }
    Ok(g)
}

/// `K = int_0^1 G Phi dtau` by the trapezoid rule on the grid.
pub fn lazy_ntk(phi: &[Matrix], g: &[Matrix], grid: LayerTimeGrid) -> Result<KernelMatrix> {
    let m = grid.steps();
    if phi.len() != m + 1 || g.len() != m + 1 {
        return Err(Error::Shape("profiles do not match the grid".into()));
    }
    let p = phi[0].rows();
    let dt = grid.dt();
    let mut k = Matrix::zeros(p, p);
    for step in 0..=m {
        let w = if step == 0 || step == m { 0.5 * dt } else { dt };
        let prod = phi[step].hadamard(&g[step]);
        k.axpy(w, &prod);
    }
    Ok(KernelMatrix {
        label: KernelLabel::Ntk,
        values: k,
    })
}

/// All lazy-limit profiles for one input kernel.
#[derive(Debug, Clone)]
pub struct LimitKernels {
    pub grid: LayerTimeGrid,
    pub activation: Activation,
    pub kx: KernelMatrix,
    pub h: Vec<Matrix>,
    pub phi: Vec<Matrix>,
    pub g: Vec<Matrix>,
    pub ntk: KernelMatrix,
}

impl LimitKernels {
    pub fn solve(act: Activation, kx: &KernelMatrix, grid: LayerTimeGrid) -> Result<Self> {
        let (h, phi) = lazy_forward_ode(act, kx, grid)?;
        let g = lazy_backward_ode(act, &h, &phi, grid)?;
        let ntk = lazy_ntk(&phi, &g, grid)?;
        Ok(Self {
            grid,
            activation: act,
            kx: kx.clone(),
            h,
            phi,
            g,
            ntk,
        })
    }

    /// Profile dump, header `tau,pair_i,pair_j,H,Phi,G`, pairs `i <= j`.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "tau,pair_i,pair_j,H,Phi,G")?;
        let p = self.kx.size();
        for step in 0..=self.grid.steps() {
            let tau = self.grid.tau(step);
            for i in 0..p {
                for j in i..p {
                    writeln!(
                        out,
                        "{tau},{i},{j},{},{},{}",
                        self.h[step].get(i, j),
                        self.phi[step].get(i, j),
                        self.g[step].get(i, j)
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Output of [`lazy_training_dynamics`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFlow {
    /// Loss `(1/P) sum (y - f)^2 / 2` before each step and after the last.
    pub loss: Vec<f64>,
    /// Final outputs.
    pub f: Vec<f64>,
    /// Loss rose for 10 consecutive steps.
    pub unstable: bool,
}

/// Euler integration of `df/dt = eta0 (1/P) K (y - f)` from `f = 0`.
pub fn lazy_training_dynamics(
    k: &KernelMatrix,
    y: &[f64],
    eta0: f64,
    steps: usize,
    dt: f64,
) -> Result<LinearFlow> {
    let p = k.size();
    if y.len() != p {
        return Err(Error::Shape("targets do not match the kernel".into()));
    }
    if k.max_asymmetry() > 1e-10 {
        return Err(Error::Precondition("kernel is not symmetric".into()));
    }
    let loss_of =
        |f: &[f64]| 0.5 * f.iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / p as f64;
    let mut f = vec![0.0; p];
    let mut loss = vec![loss_of(&f)];
    let mut rising = 0;
    let mut unstable = false;
    for _ in 0..steps {
        let delta: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
        let kd = k.values.matvec(&delta);
        for (fi, v) in f.iter_mut().zip(kd) {
            *fi += dt * eta0 * v / p as f64;
        }
        let l = loss_of(&f);
        if l > *loss.last().unwrap() {
            rising += 1;
            unstable |= rising >= 10;
        } else {
            rising = 0;
        }
        loss.push(l);
    }
    Ok(LinearFlow { loss, f, unstable })
}

/// Initial deep-linear forward profile `H0(tau) = e^tau H0`.
pub fn linear_h0_profile(h0: f64, tau: f64) -> f64 {
    tau.exp() * h0
}

/// Closed forms for the deep-linear gradient kernel at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum G0Profile {
    /// `e^{1 - tau}`, the solution of the backward ODE; matches simulation.
    BackwardOde,
    /// `e^{-tau} + 1 - e^{-1}`, the alternative printed closed form.
    Printed,
}

/// Profile pinned by the Monte Carlo check against finite networks.
pub const PINNED_G0: G0Profile = G0Profile::BackwardOde;

pub fn linear_g0_profile(tau: f64, which: G0Profile) -> f64 {
    match which {
        G0Profile::BackwardOde => (1.0 - tau).exp(),
        G0Profile::Printed => (-tau).exp() + 1.0 - (-1.0f64).exp(),
    }
}

/// Deep-linear kernel after one SGD step on a single sample, as printed:
///
/// `H1(tau) = e^tau H1(0) + 2 eta0^2 gamma0^2 y^2 e^tau
///   [tau^3/3 + tau^2/2 + (1 + e^{-1})(tau^2 e^tau - tau e^tau + e^tau - 1)]`
pub fn linear_onestep_profile(h1_0: f64, tau: f64, eta0: f64, gamma0: f64, y: f64) -> f64 {
    let et = tau.exp();
    let bracket = tau.powi(3) / 3.0
        + tau * tau / 2.0
        + (1.0 + (-1.0f64).exp()) * (tau * tau * et - tau * et + et - 1.0);
    et * h1_0 + 2.0 * (eta0 * gamma0 * y).powi(2) * et * bracket
}

/// One-step update re-derived with `G0(tau) = e^{1 - tau}`:
/// `H1(tau) = e^tau H1(0) + 2 eta0^2 gamma0^2 y^2 e^{1 + tau} (tau^3/3 + tau^2/2)`.
pub fn linear_onestep_profile_rederived(
    h1_0: f64,
    tau: f64,
    eta0: f64,
    gamma0: f64,
    y: f64,
) -> f64 {
    let et = tau.exp();
    et * h1_0 + 2.0 * (eta0 * gamma0 * y).powi(2) * E * et * (tau.powi(3) / 3.0 + tau * tau / 2.0)
}
